"""Mesh quality of deformed configurations.

The shape measure is the scaled Jacobian of a triangle: the minimum over
its corners of the edge cross product normalized by the edge lengths and
by sin(60 deg), so an equilateral triangle scores 1 and a degenerate one
0.  Inverted cells score negative.  Bijectivity of the mesh map id + u is
checked by sampling det(I + grad u) at the 28 degree-6 lattice points of
every cell; :func:`sign_degenerate` flips the quality sign of cells where
any sample is negative.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MeshMotionError
from .fem import cell_gradient_operator
from .mesh import Field, TriMesh
from .quadrature import lattice_points

HIST_BINS = 40  # uniform bins over [-1, 1]


@dataclass(frozen=True)
class QualityReport:
    """Per-cell signed scaled Jacobian plus summary statistics."""

    per_cell: np.ndarray
    min_value: float
    hist_counts: np.ndarray
    bin_edges: np.ndarray
    min_det: float

    def with_per_cell(self, per_cell: np.ndarray) -> "QualityReport":
        counts, edges = np.histogram(
            np.clip(per_cell, -1.0, 1.0), bins=HIST_BINS, range=(-1.0, 1.0)
        )
        return QualityReport(per_cell, float(per_cell.min()), counts, edges, self.min_det)


def _deformed_vertices(mesh: TriMesh, displacement: Field) -> np.ndarray:
    if displacement.value_dim != 2 or displacement.space not in ("P1", "P2"):
        raise MeshMotionError("displacement must be a P1 or P2 vector field")
    return mesh.vertices + displacement.vertex_values()


def _scaled_jacobian_values(verts: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p = verts[cells]  # (n_c, 3, 2)
    e = np.stack(
        [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1
    )  # (n_c, 3, 2)
    lengths = np.linalg.norm(e, axis=2)
    # all three corner cross products equal twice the signed area
    cross = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
    prod = lengths * np.roll(lengths, -1, axis=1)  # |e_k| |e_{k+1}|
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = cross[:, None] / prod
    q = (2.0 / np.sqrt(3.0)) * np.min(ratios, axis=1)
    q = np.where(np.any(prod == 0.0, axis=1), 0.0, q)
    return np.clip(q, -1.0, 1.0)


def cell_det_minima(mesh: TriMesh, displacement: Field) -> np.ndarray:
    """Per-cell minimum of det(I + grad u) over the degree-6 lattice."""
    if displacement.value_dim != 2:
        raise MeshMotionError("vector displacement required")
    if displacement.space == "P1":
        pts = np.array([[1.0 / 3.0, 1.0 / 3.0]])
    else:
        pts = lattice_points(6)
    grads = cell_gradient_operator(mesh, displacement.space, pts)  # (n_c, n_q, n_loc, 2)
    dofs = _cell_dof_values(mesh, displacement)  # (n_c, n_loc, 2)
    # grad u at sample points: (n_c, n_q, 2(comp), 2(deriv))
    G = np.einsum("cqad,cak->cqkd", grads, dofs)
    det = (1.0 + G[..., 0, 0]) * (1.0 + G[..., 1, 1]) - G[..., 0, 1] * G[..., 1, 0]
    return det.min(axis=1)


def _cell_dof_values(mesh: TriMesh, field: Field) -> np.ndarray:
    vals = field.node_values()
    if field.space == "P1":
        return vals[mesh.cells]
    conn = np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges])
    return vals[conn]


def min_det_gradient(mesh: TriMesh, displacement: Field) -> float:
    """Minimum of det(I + grad u) over all cells and degree-6 sample points.

    A negative value signals that the mesh map lost bijectivity.
    """
    if displacement.space != "P2":
        raise MeshMotionError("min_det_gradient expects a P2 displacement")
    return float(cell_det_minima(mesh, displacement).min())


def scaled_jacobian(mesh: TriMesh, displacement: Field) -> QualityReport:
    """Quality report of the deformed mesh (vertex geometry of id + u)."""
    verts = _deformed_vertices(mesh, displacement)
    q = _scaled_jacobian_values(verts, mesh.cells)
    counts, edges = np.histogram(q, bins=HIST_BINS, range=(-1.0, 1.0))
    min_det = float(cell_det_minima(mesh, displacement).min())
    return QualityReport(q, float(q.min()), counts, edges, min_det)


def sign_degenerate(report: QualityReport, mesh: TriMesh, displacement: Field) -> QualityReport:
    """Flip the quality sign of cells whose sampled determinant dips negative.

    Absolute values are preserved; only signs change.
    """
    dets = cell_det_minima(mesh, displacement)
    per_cell = np.where(dets < 0.0, -np.abs(report.per_cell), report.per_cell)
    return report.with_per_cell(per_cell)
