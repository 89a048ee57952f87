import numpy as np
import pytest

from meshmotion.errors import MeshMotionError
from meshmotion.mesh import Field, TriMesh
from meshmotion.geometry import unit_square_mesh
from meshmotion.quality import (
    cell_det_minima,
    min_det_gradient,
    scaled_jacobian,
    sign_degenerate,
)


def one_cell_mesh(v0, v1, v2):
    return TriMesh([v0, v1, v2], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], ["fixed"] * 3)


def p1_in_p2(mesh, vertex_values):
    """P2 field matching a piecewise-linear displacement (midpoint average)."""
    vals = np.asarray(vertex_values, dtype=float)
    mid = 0.5 * (vals[mesh.edges[:, 0]] + vals[mesh.edges[:, 1]])
    return Field(mesh, "P2", 2, np.vstack([vals, mid]).ravel())


def test_equilateral_scores_one():
    m = one_cell_mesh([0, 0], [1, 0], [0.5, np.sqrt(3) / 2])
    rep = scaled_jacobian(m, Field.zeros(m, "P1", 2))
    assert rep.per_cell[0] == pytest.approx(1.0, abs=1e-14)
    assert rep.min_value == pytest.approx(1.0, abs=1e-14)


def test_right_isoceles_value():
    # derived by hand: min cross ratio 1/sqrt(2), scaled by 2/sqrt(3)
    m = one_cell_mesh([0, 0], [1, 0], [0, 1])
    rep = scaled_jacobian(m, Field.zeros(m, "P1", 2))
    assert rep.per_cell[0] == pytest.approx(2.0 / np.sqrt(6.0), abs=1e-14)


def test_collinear_cell_scores_zero():
    m = one_cell_mesh([0, 0], [1, 0], [0, 1])
    # displacement flattening the triangle onto the x-axis
    u = Field(m, "P1", 2, np.array([[0, 0], [0, 0], [0.5, -1.0]]).ravel())
    rep = scaled_jacobian(m, u)
    assert rep.per_cell[0] == pytest.approx(0.0, abs=1e-14)


def test_zero_length_edge_scores_zero():
    m = one_cell_mesh([0, 0], [1, 0], [0, 1])
    u = Field(m, "P1", 2, np.array([[0, 0], [-1.0, 0], [0, 0]]).ravel())
    rep = scaled_jacobian(m, u)
    assert rep.per_cell[0] == 0.0


def test_rigid_motion_invariance(square6):
    rng = np.random.Generator(np.random.Philox(5))
    vals = 0.05 * rng.standard_normal((square6.n_vertices, 2))
    u = Field(square6, "P1", 2, vals.ravel())
    base = scaled_jacobian(square6, u)
    ang = 0.7
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    moved = square6.vertices + vals
    rigid = moved @ R.T + [1.3, -0.4]
    u2 = Field(square6, "P1", 2, (rigid - square6.vertices).ravel())
    rot = scaled_jacobian(square6, u2)
    assert np.abs(base.per_cell - rot.per_cell).max() < 1e-12


def test_histogram_counts_sum(square6):
    rep = scaled_jacobian(square6, Field.zeros(square6, "P1", 2))
    assert rep.hist_counts.sum() == square6.n_cells
    assert rep.min_value == rep.per_cell.min()
    assert len(rep.hist_counts) == 40


def test_min_det_identity_and_translation(square4):
    assert min_det_gradient(square4, Field.zeros(square4, "P2", 2)) == pytest.approx(1.0)
    const = Field(square4, "P2", 2, np.tile([0.3, -0.2], square4.n_nodes("P2")))
    assert min_det_gradient(square4, const) == pytest.approx(1.0, abs=1e-13)


def test_min_det_affine_exact(square4):
    A = np.array([[1.2, 0.3], [-0.1, 0.8]])
    u = Field.from_callable(square4, "P2", lambda p: p @ (A - np.eye(2)).T, 2)
    assert min_det_gradient(square4, u) == pytest.approx(np.linalg.det(A), abs=1e-13)


def fold_setup():
    """2x2 square mesh with one vertex pushed across the opposite edge.

    Expected flipped cells computed independently from deformed signed
    areas (exact for piecewise-linear displacement).
    """
    mesh = unit_square_mesh(2)
    vals = np.zeros((mesh.n_vertices, 2))
    center = int(np.argmin(np.hypot(mesh.vertices[:, 0] - 0.5, mesh.vertices[:, 1] - 0.5)))
    vals[center] = [0.75, 0.0]  # crosses the right edge of its patch
    moved = mesh.vertices + vals
    d1 = moved[mesh.cells[:, 1]] - moved[mesh.cells[:, 0]]
    d2 = moved[mesh.cells[:, 2]] - moved[mesh.cells[:, 0]]
    signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    return mesh, p1_in_p2(mesh, vals), np.where(signed < 0)[0]


def test_manufactured_fold_negative_det():
    mesh, u, flipped = fold_setup()
    assert len(flipped) > 0
    assert min_det_gradient(mesh, u) < 0.0
    dets = cell_det_minima(mesh, u)
    assert set(np.where(dets < 0)[0]) == set(flipped)


def test_sign_degenerate_flips_expected_cells():
    mesh, u, flipped = fold_setup()
    rep = scaled_jacobian(mesh, u)
    signed = sign_degenerate(rep, mesh, u)
    assert set(np.where(signed.per_cell < 0)[0]) == set(flipped)
    assert np.abs(np.abs(signed.per_cell) - np.abs(rep.per_cell)).max() < 1e-15
    assert signed.hist_counts.sum() == mesh.n_cells


def test_sign_degenerate_all_positive_unchanged(square4):
    u = Field.zeros(square4, "P2", 2)
    rep = scaled_jacobian(square4, u)
    signed = sign_degenerate(rep, square4, u)
    assert np.array_equal(signed.per_cell, rep.per_cell)


def test_sign_degenerate_full_reflection(square4):
    u = Field.from_callable(square4, "P2",
                            lambda p: np.column_stack([-2.0 * p[:, 0], np.zeros(len(p))]), 2)
    rep = scaled_jacobian(square4, u)
    signed = sign_degenerate(rep, square4, u)
    assert np.all(signed.per_cell < 0)


def test_min_det_requires_p2(square4):
    with pytest.raises(MeshMotionError):
        min_det_gradient(square4, Field.zeros(square4, "P1", 2))
