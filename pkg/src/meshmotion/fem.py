"""Shared finite element machinery.

Sparse assembly of weighted Laplacians, mass matrices and linear
elasticity on P1/P2 triangles, Dirichlet constraint handling, direct and
conjugate-gradient linear solvers, a damped Newton iteration, and
gradient recovery by vertex-patch averaging.

Assembly is vectorized over cells; the accumulation order is fixed, so
results are deterministic.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, MeshMotionError, NewtonError, NonPositiveWeightError
from .mesh import Field, TriMesh
from .quadrature import triangle_rule

# quadrature degree exact for the weighted-Laplacian integrand per space
_ASSEMBLY_DEGREE = {"P1": 2, "P2": 4}


# -- reference elements ----------------------------------------------------

def reference_basis(space: str, points: np.ndarray) -> np.ndarray:
    """Basis values at reference points; shape (n_loc, n_pts).

    P2 local order: three vertices, then midpoints of edges (0,1), (1,2),
    (2,0), matching the global node ordering.
    """
    x, y = points[:, 0], points[:, 1]
    lam = np.stack([1.0 - x - y, x, y])
    if space == "P1":
        return lam
    if space == "P2":
        l0, l1, l2 = lam
        return np.stack(
            [
                l0 * (2 * l0 - 1),
                l1 * (2 * l1 - 1),
                l2 * (2 * l2 - 1),
                4 * l0 * l1,
                4 * l1 * l2,
                4 * l2 * l0,
            ]
        )
    raise MeshMotionError(f"no nodal basis for space {space}")


def reference_gradients(space: str, points: np.ndarray) -> np.ndarray:
    """Basis gradients at reference points; shape (n_loc, n_pts, 2)."""
    x, y = points[:, 0], points[:, 1]
    lam = np.stack([1.0 - x - y, x, y])
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    n = len(points)
    if space == "P1":
        return np.broadcast_to(dlam[:, None, :], (3, n, 2)).copy()
    if space == "P2":
        g = np.empty((6, n, 2))
        for i in range(3):
            g[i] = (4 * lam[i] - 1)[:, None] * dlam[i]
        pairs = [(0, 1), (1, 2), (2, 0)]
        for k, (i, j) in enumerate(pairs):
            g[3 + k] = 4 * (lam[i][:, None] * dlam[j] + lam[j][:, None] * dlam[i])
        return g
    raise MeshMotionError(f"no nodal basis for space {space}")


def cell_geometry(mesh: TriMesh):
    """Per-cell affine map data: (inv_jac_T (n_c,2,2), areas (n_c,))."""
    v = mesh.vertices
    c = mesh.cells
    J = np.empty((mesh.n_cells, 2, 2))
    J[:, :, 0] = v[c[:, 1]] - v[c[:, 0]]
    J[:, :, 1] = v[c[:, 2]] - v[c[:, 0]]
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv_t = np.empty_like(J)
    inv_t[:, 0, 0] = J[:, 1, 1]
    inv_t[:, 0, 1] = -J[:, 1, 0]
    inv_t[:, 1, 0] = -J[:, 0, 1]
    inv_t[:, 1, 1] = J[:, 0, 0]
    inv_t /= det[:, None, None]
    return inv_t, 0.5 * det


def cell_gradient_operator(mesh: TriMesh, space: str, ref_points: np.ndarray) -> np.ndarray:
    """Physical basis gradients; shape (n_c, n_pts, n_loc, 2)."""
    inv_t, _ = cell_geometry(mesh)
    refg = reference_gradients(space, ref_points)
    return np.einsum("cij,aqj->cqai", inv_t, refg)


def cell_connectivity(mesh: TriMesh, space: str) -> np.ndarray:
    """Global node ids per cell; shape (n_c, n_loc)."""
    if space == "P1":
        return mesh.cells
    if space == "P2":
        return np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges])
    raise MeshMotionError(f"no connectivity for space {space}")


def vector_dofs(nodes: np.ndarray, value_dim: int) -> np.ndarray:
    """Coefficient dofs of the given nodes, components interleaved."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return (value_dim * nodes[:, None] + np.arange(value_dim)).ravel()


# -- sparse systems ----------------------------------------------------------

@dataclass(frozen=True)
class SparseSystem:
    """CSR matrix, right-hand side and Dirichlet constraints.

    Constraints are recorded as (dof, value) pairs and take effect through
    :meth:`constrained`, which replaces constrained rows by identity and
    symmetrically eliminates the columns into the right-hand side.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constraint_dofs: np.ndarray
    constraint_values: np.ndarray
    applied: bool = False

    @classmethod
    def new(cls, matrix, rhs=None) -> "SparseSystem":
        matrix = matrix.tocsr()
        if rhs is None:
            rhs = np.zeros(matrix.shape[0])
        return cls(matrix, np.asarray(rhs, dtype=float),
                   np.empty(0, dtype=np.int64), np.empty(0), False)

    def with_dirichlet(self, dofs, values) -> "SparseSystem":
        dofs = np.asarray(dofs, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if len(dofs) != len(values):
            raise MeshMotionError("constraint dof/value length mismatch")
        return replace(
            self,
            constraint_dofs=np.concatenate([self.constraint_dofs, dofs]),
            constraint_values=np.concatenate([self.constraint_values, values]),
        )

    def constrained(self) -> "SparseSystem":
        if self.applied:
            return self
        A, b = apply_dirichlet(
            self.matrix, self.rhs, self.constraint_dofs, self.constraint_values
        )
        return replace(self, matrix=A, rhs=b, applied=True)


def apply_dirichlet(matrix, rhs, dofs, values):
    """Row replacement with symmetric column elimination into the rhs."""
    n = matrix.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    lifted = np.zeros(n)
    lifted[dofs] = values
    rhs = rhs - matrix @ lifted
    keep = np.ones(n)
    keep[dofs] = 0.0
    P = sp.diags(keep)
    fixed = sp.diags(1.0 - keep)
    A = (P @ matrix @ P + fixed).tocsr()
    A.sum_duplicates()
    rhs = keep * rhs
    rhs[dofs] = values
    return A, rhs


def _scatter(conn: np.ndarray, elem: np.ndarray, n: int) -> sp.csr_matrix:
    n_loc = conn.shape[1]
    rows = np.repeat(conn, n_loc, axis=1).ravel()
    cols = np.tile(conn, (1, n_loc)).ravel()
    A = sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n, n))
    return A.tocsr()


def _expand_vector(A: sp.csr_matrix, value_dim: int) -> sp.csr_matrix:
    if value_dim == 1:
        return A
    return sp.kron(A, sp.identity(value_dim, format="csr"), format="csr")


def _weight_at_quadrature(mesh, weight: Field, qpts) -> np.ndarray:
    if weight.value_dim != 1:
        raise MeshMotionError("weight must be scalar")
    if weight.space == "DG0":
        return np.broadcast_to(
            weight.coefficients[:, None], (mesh.n_cells, len(qpts))
        )
    if weight.space == "P1":
        basis = reference_basis("P1", qpts)  # (3, n_q)
        vals = weight.coefficients[mesh.cells]  # (n_c, 3)
        return vals @ basis
    raise MeshMotionError("weight must be DG0 or P1")


def assemble_weighted_laplacian(
    mesh: TriMesh, weight: Field, value_dim: int = 1, space: str = "P1"
) -> SparseSystem:
    """A[i,j] = integral of weight * grad(phi_i) . grad(phi_j).

    Quadrature is exact for the polynomial integrand: degree 2 for P1,
    degree 4 for P2.  The weight must be strictly positive at every
    quadrature point; a violation raises with the offending cell.
    """
    qpts, qw = triangle_rule(_ASSEMBLY_DEGREE[space])
    w = _weight_at_quadrature(mesh, weight, qpts)
    bad = np.where(np.any(w <= 0.0, axis=1))[0]
    if bad.size:
        c = int(bad[0])
        raise NonPositiveWeightError(c, float(w[c].min()))
    grads = cell_gradient_operator(mesh, space, qpts)
    _, areas = cell_geometry(mesh)
    elem = np.einsum("q,c,cq,cqad,cqbd->cab", qw, areas, w, grads, grads, optimize=True)
    conn = cell_connectivity(mesh, space)
    A = _scatter(conn, elem, mesh.n_nodes(space))
    return SparseSystem.new(_expand_vector(A, value_dim))


def assemble_mass(mesh: TriMesh, space: str, value_dim: int = 1) -> sp.csr_matrix:
    """Mass matrix M[i,j] = integral of phi_i phi_j (exact quadrature)."""
    qpts, qw = triangle_rule(2 if space == "P1" else 4)
    basis = reference_basis(space, qpts)  # (n_loc, n_q)
    _, areas = cell_geometry(mesh)
    elem = np.einsum("q,c,aq,bq->cab", qw, areas, basis, basis, optimize=True)
    conn = cell_connectivity(mesh, space)
    M = _scatter(conn, elem, mesh.n_nodes(space))
    return _expand_vector(M, value_dim)


def assemble_elasticity(mesh: TriMesh, mu: Field, space: str = "P2") -> SparseSystem:
    """A for the form integral of 2 mu eps(u) : eps(v), vector valued."""
    qpts, qw = triangle_rule(_ASSEMBLY_DEGREE[space])
    w = _weight_at_quadrature(mesh, mu, qpts)
    bad = np.where(np.any(w <= 0.0, axis=1))[0]
    if bad.size:
        c = int(bad[0])
        raise NonPositiveWeightError(c, float(w[c].min()))
    grads = cell_gradient_operator(mesh, space, qpts)  # (c,q,a,i)
    _, areas = cell_geometry(mesh)
    n_loc = grads.shape[2]
    # eps(u):eps(v) = 0.5 (grad u : grad v + grad u : grad v^T)
    gg = np.einsum("q,c,cq,cqad,cqbd->cab", qw, areas, w, grads, grads, optimize=True)
    gt = np.einsum("q,c,cq,cqad,cqbe->cabde", qw, areas, w, grads, grads, optimize=True)
    elem = np.zeros((mesh.n_cells, 2 * n_loc, 2 * n_loc))
    for d in range(2):
        for e in range(2):
            block = (d == e) * gg + gt[..., e, d]
            elem[:, d::2, e::2] = block
    conn = cell_connectivity(mesh, space)
    vconn = 2 * np.repeat(conn, 2, axis=1) + np.tile([0, 1], n_loc)
    A = _scatter(vconn, elem, 2 * mesh.n_nodes(space))
    return SparseSystem.new(A)


def assemble_load(mesh: TriMesh, space: str, fn, value_dim: int = 1, degree: int = 4):
    """Load vector b_i = integral of f phi_i for a callable f(points)."""
    qpts, qw = triangle_rule(degree)
    basis = reference_basis(space, qpts)
    _, areas = cell_geometry(mesh)
    v0 = mesh.vertices[mesh.cells[:, 0]]
    J = np.empty((mesh.n_cells, 2, 2))
    J[:, :, 0] = mesh.vertices[mesh.cells[:, 1]] - v0
    J[:, :, 1] = mesh.vertices[mesh.cells[:, 2]] - v0
    phys = v0[:, None, :] + np.einsum("cij,qj->cqi", J, qpts)
    fvals = np.asarray(fn(phys.reshape(-1, 2)), dtype=float).reshape(
        mesh.n_cells, len(qpts), value_dim
    )
    elem = np.einsum("q,c,aq,cqk->cak", qw, areas, basis, fvals, optimize=True)
    conn = cell_connectivity(mesh, space)
    b = np.zeros(value_dim * mesh.n_nodes(space))
    np.add.at(b, vector_dofs(conn.ravel(), value_dim).reshape(-1, value_dim),
              elem.reshape(-1, value_dim))
    return b


# -- linear solvers ----------------------------------------------------------

class DirectFactor:
    """LU factorization wrapper reusable across multiple right-hand sides."""

    def __init__(self, matrix):
        try:
            self._lu = spla.splu(matrix.tocsc())
        except RuntimeError as exc:
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        self._matrix = matrix.tocsr()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise FactorizationError("factorization produced non-finite solution")
        return x

    def solve_refined(self, rhs: np.ndarray) -> np.ndarray:
        x = self.solve(rhs)
        x = x + self.solve(rhs - self._matrix @ x)
        return x


def solve_linear(system: SparseSystem, method: str = "direct") -> np.ndarray:
    """Solve the constrained system; residual <= 1e-10 (1 + |rhs|).

    ``method`` is "direct" (sparse LU, default) or "cg" (conjugate
    gradients with Jacobi preconditioner, tolerance 1e-12) for large
    symmetric positive definite systems.
    """
    if not system.applied and len(system.constraint_dofs):
        raise MeshMotionError("apply constraints before solving")
    A, b = system.matrix, system.rhs
    if method == "direct":
        x = DirectFactor(A).solve_refined(b)
    elif method == "cg":
        d = A.diagonal()
        if np.any(d <= 0):
            raise FactorizationError("non-positive diagonal; CG needs SPD")
        M = spla.LinearOperator(A.shape, lambda v: v / d)
        x, info = spla.cg(A, b, rtol=1e-12, atol=0.0, M=M, maxiter=20 * A.shape[0])
        if info != 0:
            raise FactorizationError(f"CG did not converge (info={info})")
    else:
        raise MeshMotionError(f"unknown solve method {method}")
    res = np.linalg.norm(A @ x - b)
    if res > 1e-10 * (1.0 + np.linalg.norm(b)):
        raise FactorizationError(f"linear residual {res:.3e} above tolerance")
    return x


def dump_matrix(system: SparseSystem, path):
    """Write the matrix in MatrixMarket coordinate format (debug aid)."""
    from scipy.io import mmwrite

    mmwrite(str(path), system.matrix.tocoo())


# -- Newton ------------------------------------------------------------------

@dataclass(frozen=True)
class NewtonConfig:
    atol: float = 1e-12
    rtol: float = 1e-10
    max_iterations: int = 30
    backtrack_factor: float = 0.5
    max_backtracks: int = 25

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0:
            raise MeshMotionError("Newton tolerances must be positive")
        if self.max_iterations < 1:
            raise MeshMotionError("Newton needs at least one iteration")


def newton_solve(
    callback,
    x0,
    config: NewtonConfig = NewtonConfig(),
    residual_only=None,
    linear_solver=None,
):
    """Damped Newton iteration.

    ``callback(x)`` returns (residual, sparse jacobian).  The optional
    ``residual_only(x)`` avoids Jacobian assembly during backtracking, and
    ``linear_solver(J, rhs)`` overrides the default sparse LU step solve.
    Convergence: |r| <= max(atol, rtol |r0|).  Non-convergence raises
    :class:`NewtonError` carrying the last residual norm.
    """
    x = np.asarray(x0, dtype=float).copy()
    r, J = callback(x)
    rnorm = _safe_norm(r)
    tol = max(config.atol, config.rtol * rnorm)
    reval = residual_only or (lambda xx: callback(xx)[0])
    solve = linear_solver or (lambda A, b: DirectFactor(A).solve(b))
    for it in range(config.max_iterations):
        if rnorm <= tol:
            return x
        try:
            dx = solve(J, -r)
        except FactorizationError as exc:
            raise NewtonError(rnorm, it, f"Newton linear solve failed: {exc}") from exc
        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks + 1):
            x_trial = x + step * dx
            rn_trial = _safe_norm(reval(x_trial))
            if rn_trial < rnorm or rn_trial <= tol:
                accepted = True
                break
            step *= config.backtrack_factor
        if not accepted:
            raise NewtonError(rnorm, it + 1, "backtracking stalled")
        x = x_trial
        r, J = callback(x)
        rnorm = _safe_norm(r)
    if rnorm <= tol:
        return x
    raise NewtonError(rnorm, config.max_iterations)


def _safe_norm(r):
    n = np.linalg.norm(r)
    return n if np.isfinite(n) else np.inf


# -- gradient recovery --------------------------------------------------------

def clement_matrix(mesh: TriMesh, space: str) -> sp.csr_matrix:
    """Sparse operator taking a vector field to its recovered gradient.

    Maps coefficients of a P1/P2 vector field to a 4-component P1 field
    holding, at each vertex, the area-weighted average over the adjacent
    cells of the cellwise mean gradient (the L2 projection onto constants
    over the vertex patch).  Component order:
    (du1/dx, du1/dy, du2/dx, du2/dy).

    The matrix is cached on the mesh, so repeated recovery is literally
    the same sparse matrix-vector product.
    """
    cache = mesh.__dict__.setdefault("_clement_cache", {})
    if space in cache:
        return cache[space]
    centroid = np.array([[1.0 / 3.0, 1.0 / 3.0]])
    grads = cell_gradient_operator(mesh, space, centroid)[:, 0]  # (n_c, n_loc, 2)
    _, areas = cell_geometry(mesh)
    conn = cell_connectivity(mesh, space)
    n_loc = conn.shape[1]
    patch = np.zeros(mesh.n_vertices)
    np.add.at(patch, mesh.cells.ravel(), np.repeat(areas, 3))

    # entry for vertex v (in cell c), input node a, component i, deriv j:
    # row 4 v + 2 i + j, col 2 a + i, value (area_c / patch_v) dphi_a/dx_j
    w = areas[:, None] / patch[mesh.cells]  # (n_c, 3)
    rows, cols, vals = [], [], []
    for local_v in range(3):
        v_ids = mesh.cells[:, local_v]
        for i in range(2):
            for j in range(2):
                r = 4 * v_ids + 2 * i + j
                for a in range(n_loc):
                    rows.append(np.broadcast_to(r, (mesh.n_cells,)))
                    cols.append(2 * conn[:, a] + i)
                    vals.append(w[:, local_v] * grads[:, a, j])
    C = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(4 * mesh.n_vertices, 2 * mesh.n_nodes(space)),
    ).tocsr()
    cache[space] = C
    return C


def clement_gradient(field: Field) -> Field:
    """Recovered gradient of a P1/P2 vector field as a 4-component P1 field."""
    if field.value_dim != 2 or field.space not in ("P1", "P2"):
        raise MeshMotionError("clement_gradient expects a P1/P2 vector field")
    C = clement_matrix(field.mesh, field.space)
    return Field(field.mesh, "P1", 4, C @ field.coefficients)
