"""Classic extension operators.

Each operator maps a boundary displacement g to a displacement field u on
the whole mesh with u = g on the boundary: harmonic, biharmonic (mixed
form with weakly vanishing normal derivative), regularized p-Laplace, and
linear-elastic with a harmonically interpolated stiffness field.  The
incremental wrapper re-solves any of them for the displacement increment
on the already-deformed mesh.
"""

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import MeshMotionError
from .fem import (
    DirectFactor,
    NewtonConfig,
    apply_dirichlet,
    assemble_elasticity,
    assemble_mass,
    assemble_weighted_laplacian,
    cell_connectivity,
    cell_geometry,
    cell_gradient_operator,
    newton_solve,
    vector_dofs,
)
from .mesh import Field, TriMesh, deform
from .quadrature import triangle_rule
from .timing import NULL_TIMER


@dataclass(frozen=True)
class BoundaryDisplacement:
    """Displacement values on every boundary node of the target space."""

    space: str
    node_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=float).reshape(len(ids), 2)
        order = np.argsort(ids)
        object.__setattr__(self, "node_ids", ids[order])
        object.__setattr__(self, "values", vals[order])
        if len(np.unique(self.node_ids)) != len(ids):
            raise MeshMotionError("duplicate boundary nodes")
        if not np.all(np.isfinite(self.values)):
            raise MeshMotionError("non-finite boundary values")

    @classmethod
    def from_callable(cls, mesh: TriMesh, fn, space: str = "P2", moving_tags=("moving",)):
        """Evaluate ``fn(points) -> (n, 2)`` on the selected tags, zero elsewhere.

        ``moving_tags=None`` applies ``fn`` on the whole boundary.
        """
        ids = mesh.boundary_node_set(space)
        vals = np.zeros((len(ids), 2))
        coords = mesh.node_coords(space)
        if moving_tags is None:
            vals[:] = np.asarray(fn(coords[ids]), dtype=float).reshape(-1, 2)
        else:
            moving = mesh.boundary_node_set(space, moving_tags)
            sel = np.isin(ids, moving)
            if sel.any():
                vals[sel] = np.asarray(fn(coords[ids[sel]]), dtype=float).reshape(-1, 2)
        return cls(space, ids, vals)

    @classmethod
    def zero(cls, mesh: TriMesh, space: str = "P2"):
        ids = mesh.boundary_node_set(space)
        return cls(space, ids, np.zeros((len(ids), 2)))

    @classmethod
    def from_node_values(cls, mesh: TriMesh, node_values, space: str = "P2"):
        """Take the boundary trace of per-node values (n_nodes, 2)."""
        ids = mesh.boundary_node_set(space)
        return cls(space, ids, np.asarray(node_values)[ids])

    def __sub__(self, other: "BoundaryDisplacement") -> "BoundaryDisplacement":
        self._check(other)
        return BoundaryDisplacement(self.space, self.node_ids, self.values - other.values)

    def __add__(self, other: "BoundaryDisplacement") -> "BoundaryDisplacement":
        self._check(other)
        return BoundaryDisplacement(self.space, self.node_ids, self.values + other.values)

    def scaled(self, a: float) -> "BoundaryDisplacement":
        return BoundaryDisplacement(self.space, self.node_ids, a * self.values)

    def _check(self, other):
        if self.space != other.space or not np.array_equal(self.node_ids, other.node_ids):
            raise MeshMotionError("boundary displacements on different node sets")

    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if len(self.values) else 0.0

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "values": {str(int(i)): v.tolist() for i, v in zip(self.node_ids, self.values)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryDisplacement":
        ids = [int(k) for k in d["values"]]
        vals = [d["values"][str(i)] for i in ids]
        return cls(d["space"], ids, vals)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "BoundaryDisplacement":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class ElasticStiffnessConfig:
    mu_max: float
    mu_min: float
    gamma_tag: str = "moving"

    def __post_init__(self):
        if not (self.mu_max >= self.mu_min > 0):
            raise MeshMotionError("need mu_max >= mu_min > 0")


def _check_complete(mesh: TriMesh, g: BoundaryDisplacement, space: str):
    if g.space != space:
        raise MeshMotionError(f"boundary data is {g.space}, operator needs {space}")
    if not np.array_equal(g.node_ids, mesh.boundary_node_set(space)):
        raise MeshMotionError("boundary data does not cover all boundary nodes")


def _solve_componentwise(factor: DirectFactor, make_rhs, n: int) -> np.ndarray:
    """Solve the shared constrained matrix for both components."""
    rhs = np.column_stack([make_rhs(0), make_rhs(1)])
    x = factor.solve_refined(rhs)
    out = np.empty(2 * n)
    out[0::2] = x[:, 0]
    out[1::2] = x[:, 1]
    return out


def harmonic_extend(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    space: str = "P2",
    timer=NULL_TIMER,
) -> Field:
    """Componentwise Laplace solve with Dirichlet data g."""
    _check_complete(mesh, g, space)
    n = mesh.n_nodes(space)
    with timer.section("assembly"):
        weight = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
        A = assemble_weighted_laplacian(mesh, weight, 1, space).matrix
        bnodes = g.node_ids
        A_c, rhs0 = apply_dirichlet(A, np.zeros(n), bnodes, g.values[:, 0])
        lift = np.zeros((n, 2))
        lift[bnodes] = g.values
        keep = np.ones(n)
        keep[bnodes] = 0.0
        rhs = keep[:, None] * (-(A @ lift)) + lift * (1.0 - keep)[:, None]
    with timer.section("linear_solve"):
        factor = DirectFactor(A_c)
        coeffs = _solve_componentwise(factor, lambda d: rhs[:, d], n)
    return Field(mesh, space, 2, coeffs)


def biharmonic_extend(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    timer=NULL_TIMER,
    return_auxiliary: bool = False,
):
    """Mixed solve of the fourth-order extension with u = g on the boundary.

    Unknowns (u, z) per component: (z, phi) - (grad u, grad phi) = 0 for
    all phi (no boundary term, which imposes a vanishing normal derivative
    weakly), and (grad z, grad psi) = 0 for interior psi; u = g strongly,
    z unconstrained.
    """
    space = "P2"
    _check_complete(mesh, g, space)
    n = mesh.n_nodes(space)
    bnodes = g.node_ids
    with timer.section("assembly"):
        weight = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
        K = assemble_weighted_laplacian(mesh, weight, 1, space).matrix
        M = assemble_mass(mesh, space)
        keep = np.ones(n)
        keep[bnodes] = 0.0
        P_int = sp.diags(keep)
        D_bnd = sp.diags(1.0 - keep)
        A = sp.vstack(
            [sp.hstack([M, -K]), sp.hstack([P_int @ K, D_bnd])], format="csr"
        )
    with timer.section("linear_solve"):
        factor = DirectFactor(A)

        def make_rhs(d):
            b = np.zeros(2 * n)
            b[n + bnodes] = g.values[:, d]
            return b

        zu = np.column_stack([factor.solve_refined(make_rhs(0)),
                              factor.solve_refined(make_rhs(1))])
    u = np.empty(2 * n)
    u[0::2] = zu[n:, 0]
    u[1::2] = zu[n:, 1]
    field = Field(mesh, space, 2, u)
    if return_auxiliary:
        z = np.empty(2 * n)
        z[0::2] = zu[:n, 0]
        z[1::2] = zu[:n, 1]
        return field, Field(mesh, space, 2, z)
    return field


def _nonlinear_diffusion_callbacks(mesh, space, bnodes, weight_fn, dweight_fn, timer):
    """Residual/Jacobian of -div(w(|grad u|^2) grad u) with Dirichlet rows.

    The iterate keeps its boundary values; constrained rows are replaced
    by identity with zero residual.
    """
    qpts, qw = triangle_rule(4)
    grads = cell_gradient_operator(mesh, space, qpts)  # (c,q,a,i)
    _, areas = cell_geometry(mesh)
    conn = cell_connectivity(mesh, space)
    n_loc = conn.shape[1]
    n = mesh.n_nodes(space)
    vconn = 2 * np.repeat(conn, 2, axis=1) + np.tile([0, 1], n_loc)
    free = np.ones(2 * n)
    free[vector_dofs(bnodes, 2)] = 0.0
    scale = qw[None, :] * areas[:, None]  # (c, q)

    def gather(x):
        return x.reshape(n, 2)[conn]  # (c, a, k)

    def residual(x):
        with timer.section("assembly"):
            u = gather(x)
            G = np.einsum("cqad,cak->cqkd", grads, u)  # grad u at qp
            s = np.einsum("cqkd,cqkd->cq", G, G)
            w = weight_fn(s)
            r_elem = np.einsum("cq,cq,cqkd,cqad->cak", scale, w, G, grads, optimize=True)
            r = np.zeros(2 * n)
            np.add.at(r.reshape(n, 2), conn.ravel(), r_elem.reshape(-1, 2))
            return free * r

    def full(x):
        r = residual(x)
        with timer.section("assembly"):
            u = gather(x)
            G = np.einsum("cqad,cak->cqkd", grads, u)
            s = np.einsum("cqkd,cqkd->cq", G, G)
            w = weight_fn(s)
            dw = dweight_fn(s)
            # b[(a,k)] = grad u[k] . grad phi_a  at each qp
            b = np.einsum("cqkd,cqad->cqak", G, grads)
            term1 = np.einsum("cq,cq,cqad,cqbd->cab", scale, w, grads, grads, optimize=True)
            term2 = 2.0 * np.einsum("cq,cq,cqak,cqbe->cakbe", scale, dw, b, b, optimize=True)
            elem = np.zeros((mesh.n_cells, 2 * n_loc, 2 * n_loc))
            for d in range(2):
                elem[:, d::2, d::2] += term1
            elem += term2.reshape(mesh.n_cells, 2 * n_loc, 2 * n_loc)
            rows = np.repeat(vconn, 2 * n_loc, axis=1).ravel()
            cols = np.tile(vconn, (1, 2 * n_loc)).ravel()
            J = sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(2 * n, 2 * n)).tocsr()
            Pf = sp.diags(free)
            J = (Pf @ J @ Pf + sp.diags(1.0 - free)).tocsr()
        return r, J

    return full, residual


def p_laplace_extend(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    p: float,
    delta: float = 1e-10,
    config: NewtonConfig | None = None,
    timer=NULL_TIMER,
) -> Field:
    """Newton solve of the regularized p-Laplace extension, p >= 2.

    The harmonic extension serves as the initial guess (the p = 2 solve),
    so larger p starts from a consistent state.
    """
    if p < 2:
        raise MeshMotionError("p must be >= 2")
    if delta < 0:
        raise MeshMotionError("delta must be >= 0")
    space = "P2"
    _check_complete(mesh, g, space)
    u0 = harmonic_extend(mesh, g, space, timer=timer)
    if p == 2:
        return u0
    ex = (p - 2.0) / 2.0

    def weight(s):
        return (delta + s) ** ex

    def dweight(s):
        return ex * (delta + s) ** (ex - 1.0)

    full, res = _nonlinear_diffusion_callbacks(mesh, space, g.node_ids, weight, dweight, timer)
    config = config or NewtonConfig(atol=1e-12, rtol=1e-12, max_iterations=40)
    x = newton_solve(
        full, u0.coefficients, config, residual_only=res,
        linear_solver=timed_lu_solver(timer),
    )
    return Field(mesh, space, 2, x)


def timed_lu_solver(timer):
    """Newton step solver that books its time under "linear_solve"."""

    def solve(J, rhs):
        with timer.section("linear_solve"):
            return DirectFactor(J).solve(rhs)

    return solve


def elastic_stiffness_field(mesh: TriMesh, cfg: ElasticStiffnessConfig, timer=NULL_TIMER) -> Field:
    """Harmonic P1 interpolation of the boundary-prescribed stiffness.

    mu = mu_max on the configured tag, mu_min on the rest of the boundary.
    """
    if cfg.gamma_tag not in mesh.tags:
        raise MeshMotionError(f"mesh has no boundary tag {cfg.gamma_tag!r}")
    with timer.section("assembly"):
        w1 = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
        A1 = assemble_weighted_laplacian(mesh, w1, 1, "P1").matrix
        bverts = mesh.boundary_vertex_set()
        gamma = mesh.boundary_vertex_set(cfg.gamma_tag)
        mu_b = np.full(len(bverts), cfg.mu_min)
        mu_b[np.isin(bverts, gamma)] = cfg.mu_max
        A1c, b1 = apply_dirichlet(A1, np.zeros(mesh.n_vertices), bverts, mu_b)
    with timer.section("linear_solve"):
        mu = DirectFactor(A1c).solve_refined(b1)
    return Field(mesh, "P1", 1, mu)


def elastic_extend(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    cfg: ElasticStiffnessConfig,
    timer=NULL_TIMER,
) -> Field:
    """Linear elasticity with the scalar stiffness field of
    :func:`elastic_stiffness_field` and Dirichlet data g."""
    space = "P2"
    _check_complete(mesh, g, space)
    mu_field = elastic_stiffness_field(mesh, cfg, timer=timer)
    n = mesh.n_nodes(space)
    with timer.section("assembly"):
        A = assemble_elasticity(mesh, mu_field, space).matrix
        dofs = vector_dofs(g.node_ids, 2)
        A_c, rhs = apply_dirichlet(A, np.zeros(2 * n), dofs, g.values.ravel())
    with timer.section("linear_solve"):
        coeffs = DirectFactor(A_c).solve_refined(rhs)
    return Field(mesh, space, 2, coeffs)


def incremental_extend(
    base_op,
    mesh: TriMesh,
    u_old: Field,
    g: BoundaryDisplacement,
    g_old: BoundaryDisplacement,
) -> Field:
    """Solve the base operator on the deformed mesh for g - g_old, add back.

    The deformed mesh is rebuilt each call; a degenerate deformed cell
    raises before any solve.
    """
    moved = deform(mesh, u_old)
    u_delta = base_op(moved, g - g_old)
    return u_old.with_coefficients(u_old.coefficients + u_delta.coefficients)
