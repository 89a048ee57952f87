"""Extension operator driven by the learned convex diffusion coefficient.

Solves -div(alpha(theta, |grad u|^2) grad u) = 0 with u = g on the
boundary, in three flavors: a full Newton solve, a linearized incremental
solve on the deformed mesh with the coefficient lagged from the previous
state, and a threshold switch between the two.  Training fits the raw
network weights so the solutions match biharmonic targets in the combined
L2 + H1-seminorm.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .errors import DegenerateCellError, MeshMotionError, NewtonError
from .extensions import BoundaryDisplacement, timed_lu_solver
from .fem import (
    DirectFactor,
    NewtonConfig,
    apply_dirichlet,
    assemble_mass,
    assemble_weighted_laplacian,
    cell_connectivity,
    cell_geometry,
    cell_gradient_operator,
    newton_solve,
    vector_dofs,
)
from .icnn import IcnnParams, alpha_derivative, alpha_eval
from .mesh import Field, TriMesh, deform
from .quadrature import triangle_rule
from .timing import NULL_TIMER

_SPACE = "P2"


@dataclass(frozen=True)
class HybridTrainConfig:
    n_subsample: int = 20
    regularization: float = 0.0
    max_iterations: int = 100
    gradient_method: str = "finite-difference"  # or "adjoint"
    fd_step: float = 1e-6
    history_size: int = 10

    def __post_init__(self):
        if self.n_subsample < 1 or self.max_iterations < 1:
            raise MeshMotionError("n_subsample and max_iterations must be >= 1")
        if self.regularization < 0:
            raise MeshMotionError("regularization weight must be >= 0")
        if self.gradient_method not in ("finite-difference", "adjoint"):
            raise MeshMotionError(f"unknown gradient method {self.gradient_method}")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "auto"  # nonlinear | incremental-lagging | auto
    threshold: float = 0.005
    probe: str = "max"  # "max" over the moving boundary, or "point"
    probe_point: tuple | None = None

    def __post_init__(self):
        if self.threshold <= 0:
            raise MeshMotionError("threshold must be positive")
        if self.strategy not in ("nonlinear", "incremental-lagging", "auto"):
            raise MeshMotionError(f"unknown strategy {self.strategy}")
        if self.probe not in ("max", "point"):
            raise MeshMotionError(f"unknown probe {self.probe}")


@dataclass
class HybridState:
    """Reference state threaded through incremental/auto calls."""

    u_old: Field | None = None
    g_old: BoundaryDisplacement | None = None
    last_branch: str | None = None


class _HybridOperator:
    """Precomputed element data for the nonlinear solve on one mesh."""

    def __init__(self, mesh: TriMesh, params: IcnnParams, timer=NULL_TIMER):
        self.mesh = mesh
        self.params = params
        self.timer = timer
        qpts, qw = triangle_rule(4)
        grads = cell_gradient_operator(mesh, _SPACE, qpts)
        _, areas = cell_geometry(mesh)
        scale = qw[None, :] * areas[:, None]
        # unweighted element stiffness (n_c, n_loc, n_loc)
        self.k_elem = np.einsum("cq,cqad,cqbd->cab", scale, grads, grads, optimize=True)
        centroid = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        self.grad_centroid = cell_gradient_operator(mesh, _SPACE, centroid)[:, 0]
        self.conn = cell_connectivity(mesh, _SPACE)
        self.n_loc = self.conn.shape[1]
        self.n = mesh.n_nodes(_SPACE)
        self.vconn = 2 * np.repeat(self.conn, 2, axis=1) + np.tile([0, 1], self.n_loc)
        self.free = np.ones(2 * self.n)
        self.free[vector_dofs(mesh.boundary_node_set(_SPACE), 2)] = 0.0
        self._rows = np.repeat(self.vconn, 2 * self.n_loc, axis=1).ravel()
        self._cols = np.tile(self.vconn, (1, 2 * self.n_loc)).ravel()

    def gather(self, x):
        return x.reshape(self.n, 2)[self.conn]  # (c, a, k)

    def coefficient_state(self, x):
        u = self.gather(x)
        G = np.einsum("cad,cak->ckd", self.grad_centroid, u)  # (c, comp, deriv)
        s = np.einsum("ckd,ckd->c", G, G)
        return u, G, s

    def residual(self, x, alpha=None, state=None):
        u, G, s = state if state is not None else self.coefficient_state(x)
        if alpha is None:
            with self.timer.section("nn_eval"):
                alpha = alpha_eval(self.params, s)
        with self.timer.section("assembly"):
            ku = np.einsum("cab,cbk->cak", self.k_elem, u)  # (c, a, k)
            r = np.zeros((self.n, 2))
            np.add.at(r, self.conn.ravel(), (alpha[:, None, None] * ku).reshape(-1, 2))
            return self.free * r.ravel(), ku

    def callback(self, x):
        state = self.coefficient_state(x)
        _, G, s = state
        with self.timer.section("nn_eval"):
            alpha = alpha_eval(self.params, s)
            dalpha = alpha_derivative(self.params, s)
        r, ku = self.residual(x, alpha=alpha, state=state)
        with self.timer.section("assembly"):
            # d s / d u_(b,e) = 2 sum_d G[e,d] grad_centroid[b,d]
            t = 2.0 * np.einsum("ced,cbd->cbe", G, self.grad_centroid)
            elem = np.zeros((self.mesh.n_cells, 2 * self.n_loc, 2 * self.n_loc))
            for d in range(2):
                elem[:, d::2, d::2] = alpha[:, None, None] * self.k_elem
            elem += dalpha[:, None, None] * np.einsum(
                "cak,cbe->cakbe", ku, t
            ).reshape(self.mesh.n_cells, 2 * self.n_loc, 2 * self.n_loc)
            J = sp.coo_matrix(
                (elem.ravel(), (self._rows, self._cols)), shape=(2 * self.n, 2 * self.n)
            ).tocsr()
            Pf = sp.diags(self.free)
            J = (Pf @ J @ Pf + sp.diags(1.0 - self.free)).tocsr()
        return r, J

    def lifted_guess(self, g: BoundaryDisplacement):
        x0 = np.zeros(2 * self.n)
        x0[vector_dofs(g.node_ids, 2)] = g.values.ravel()
        return x0


def _check_g(mesh, g):
    if g.space != _SPACE or not np.array_equal(g.node_ids, mesh.boundary_node_set(_SPACE)):
        raise MeshMotionError("boundary data must cover all P2 boundary nodes")


# above this vector-dof count the Newton path would factor a very large
# coupled matrix; a lagged-coefficient fixed point with scalar solves is
# used instead (one reassembly + factorization per sweep)
_PICARD_THRESHOLD = 300_000


def hybrid_extend_nonlinear(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    params: IcnnParams,
    config: NewtonConfig | None = None,
    x0=None,
    timer=NULL_TIMER,
    operator: _HybridOperator | None = None,
    method: str = "auto",
) -> Field:
    """Nonlinear solve of the learned extension (strategy 1).

    Newton with the consistent Jacobian by default; on very large meshes
    (or with ``method="picard"``) the coefficient is lagged and the linear
    solves stay componentwise scalar.  Either way the converged residual
    satisfies |r| <= 1e-9 (1 + |r0|).
    """
    _check_g(mesh, g)
    config = config or NewtonConfig(atol=1e-9, rtol=1e-9, max_iterations=40)
    n = mesh.n_nodes(_SPACE)
    if method == "auto":
        method = "picard" if 2 * n > _PICARD_THRESHOLD else "newton"
    if method == "picard":
        return _picard_solve(mesh, g, params, config, timer)
    op = operator or _HybridOperator(mesh, params, timer)
    if x0 is None:
        x0 = op.lifted_guess(g)
    else:
        x0 = np.asarray(x0, dtype=float).copy()
        x0[vector_dofs(g.node_ids, 2)] = g.values.ravel()
    x = newton_solve(
        op.callback,
        x0,
        config,
        residual_only=lambda xx: op.residual(xx)[0],
        linear_solver=timed_lu_solver(timer),
    )
    return Field(mesh, _SPACE, 2, x)


def _picard_solve(mesh, g, params, config: NewtonConfig, timer) -> Field:
    op = _HybridOperator(mesh, params, timer)
    bnodes = g.node_ids
    keep = np.ones(op.n)
    keep[bnodes] = 0.0
    x = op.lifted_guess(g)
    r0 = np.linalg.norm(op.residual(x)[0])
    tol = max(config.atol, config.rtol * r0) if r0 > 0 else config.atol
    for _ in range(config.max_iterations):
        if np.linalg.norm(op.residual(x)[0]) <= tol:
            return Field(mesh, _SPACE, 2, x)
        alpha = lagged_coefficient(mesh, Field(mesh, _SPACE, 2, x), params, timer=timer)
        with timer.section("assembly"):
            A = assemble_weighted_laplacian(mesh, alpha, 1, _SPACE).matrix
            A_c, _ = apply_dirichlet(A, np.zeros(op.n), bnodes, g.values[:, 0])
            lift = np.zeros((op.n, 2))
            lift[bnodes] = g.values
            rhs = keep[:, None] * (-(A @ lift)) + lift * (1.0 - keep)[:, None]
        with timer.section("linear_solve"):
            sol = DirectFactor(A_c).solve_refined(rhs)
        x = np.empty(2 * op.n)
        x[0::2] = sol[:, 0]
        x[1::2] = sol[:, 1]
    rnorm = float(np.linalg.norm(op.residual(x)[0]))
    if rnorm <= tol:
        return Field(mesh, _SPACE, 2, x)
    raise NewtonError(rnorm, config.max_iterations, "lagged-coefficient iteration stalled")


def lagged_coefficient(mesh: TriMesh, u_old: Field, params: IcnnParams, timer=NULL_TIMER) -> Field:
    """DG0 coefficient field alpha(|grad u_old|^2) at cell centroids."""
    centroid = np.array([[1.0 / 3.0, 1.0 / 3.0]])
    grads = cell_gradient_operator(mesh, u_old.space, centroid)[:, 0]
    u = u_old.node_values()[cell_connectivity(mesh, u_old.space)]
    G = np.einsum("cad,cak->ckd", grads, u)
    s = np.einsum("ckd,ckd->c", G, G)
    with timer.section("nn_eval"):
        alpha = alpha_eval(params, s)
    return Field(mesh, "DG0", 1, alpha)


def hybrid_extend_incremental(
    mesh: TriMesh,
    u_old: Field,
    g: BoundaryDisplacement,
    g_old: BoundaryDisplacement,
    params: IcnnParams,
    timer=NULL_TIMER,
) -> Field:
    """One linear solve on the deformed mesh with the lagged coefficient.

    The coefficient is frozen from u_old (evaluated on the reference
    configuration where u_old lives) and used as a cellwise constant
    weight in the assembly over the deformed mesh.
    """
    _check_g(mesh, g)
    alpha = lagged_coefficient(mesh, u_old, params, timer=timer)
    moved = deform(mesh, u_old)
    alpha_moved = Field(moved, "DG0", 1, alpha.coefficients)
    g_delta = g - g_old
    with timer.section("assembly"):
        A = assemble_weighted_laplacian(moved, alpha_moved, 1, _SPACE).matrix
    n = mesh.n_nodes(_SPACE)
    bnodes = g.node_ids
    with timer.section("assembly"):
        A_c, _ = apply_dirichlet(A, np.zeros(n), bnodes, g_delta.values[:, 0])
        lift = np.zeros((n, 2))
        lift[bnodes] = g_delta.values
        keep = np.ones(n)
        keep[bnodes] = 0.0
        rhs = keep[:, None] * (-(A @ lift)) + lift * (1.0 - keep)[:, None]
    with timer.section("linear_solve"):
        x = DirectFactor(A_c).solve_refined(rhs)
    coeffs = np.empty(2 * n)
    coeffs[0::2] = x[:, 0]
    coeffs[1::2] = x[:, 1]
    return u_old.with_coefficients(u_old.coefficients + coeffs)


def probe_value(mesh: TriMesh, g: BoundaryDisplacement, cfg: StrategyConfig) -> float:
    """Displacement magnitude used by the strategy switch."""
    if cfg.probe == "point":
        if cfg.probe_point is None:
            raise MeshMotionError("probe 'point' needs probe_point")
        ids = _moving_nodes(mesh)
        coords = mesh.node_coords(_SPACE)[ids]
        j = int(np.argmin(np.hypot(*(coords - np.asarray(cfg.probe_point)).T)))
        sel = np.searchsorted(g.node_ids, ids[j])
        return float(abs(g.values[sel, 1]))
    ids = _moving_nodes(mesh)
    sel = np.isin(g.node_ids, ids)
    return float(np.abs(g.values[sel]).max()) if sel.any() else 0.0


def _moving_nodes(mesh):
    if "moving" in mesh.tags:
        return mesh.boundary_node_set(_SPACE, ("moving",))
    return mesh.boundary_node_set(_SPACE)


def hybrid_extend_auto(
    mesh: TriMesh,
    state: HybridState,
    g: BoundaryDisplacement,
    params: IcnnParams,
    cfg: StrategyConfig = StrategyConfig(),
    timer=NULL_TIMER,
) -> tuple[Field, HybridState]:
    """Threshold-switched strategy (strategy 3).

    Below the probe threshold the nonlinear operator runs and resets the
    incremental reference state; above it the incremental linearized step
    continues from the stored state.  If the chosen branch fails the other
    one is tried; if both fail the nonlinear error propagates.
    """
    if cfg.strategy == "nonlinear":
        u = hybrid_extend_nonlinear(mesh, g, params, timer=timer)
        return u, HybridState(u, g, "nonlinear")
    if cfg.strategy == "incremental-lagging":
        u_old, g_old = _reference(mesh, state)
        u = hybrid_extend_incremental(mesh, u_old, g, g_old, params, timer=timer)
        return u, HybridState(u, g, "incremental")

    if probe_value(mesh, g, cfg) < cfg.threshold:
        u = hybrid_extend_nonlinear(mesh, g, params, timer=timer)
        return u, HybridState(u, g, "nonlinear")
    u_old, g_old = _reference(mesh, state)
    try:
        u = hybrid_extend_incremental(mesh, u_old, g, g_old, params, timer=timer)
        return u, HybridState(u, g, "incremental")
    except (NewtonError, DegenerateCellError):
        u = hybrid_extend_nonlinear(mesh, g, params, timer=timer)
        return u, HybridState(u, g, "nonlinear")


def _reference(mesh, state: HybridState):
    u_old = state.u_old if state.u_old is not None else Field.zeros(mesh, _SPACE, 2)
    g_old = state.g_old if state.g_old is not None else BoundaryDisplacement.zero(mesh, _SPACE)
    return u_old, g_old


# -- training -----------------------------------------------------------------

def energy_norm_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """M + K on the P2 vector space: |||v|||^2 = v' (M + K) v."""
    cache = mesh.__dict__.setdefault("_hybrid_norm_cache", {})
    if "MK" not in cache:
        weight = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
        K = assemble_weighted_laplacian(mesh, weight, 2, _SPACE).matrix
        M = assemble_mass(mesh, _SPACE, 2)
        cache["MK"] = (M + K).tocsr()
    return cache["MK"]


def triple_norm_sq(field: Field) -> float:
    """Squared L2 + H1-seminorm of a P2 vector field."""
    A = energy_norm_matrix(field.mesh)
    return float(field.coefficients @ (A @ field.coefficients))


class HybridLossProblem:
    """Supervised training loss for the nonlinear hybrid operator.

    Snapshots are (boundary displacement, biharmonic target) pairs on one
    mesh.  Inner solves warm-start from the previous solution of the same
    snapshot; a failed solve marks the evaluation infinite so the line
    search rejects the step.
    """

    def __init__(self, mesh, pairs, params0: IcnnParams, cfg: HybridTrainConfig):
        self.mesh = mesh
        self.pairs = list(pairs)
        self.params0 = params0
        self.cfg = cfg
        self.operator_params = params0
        self.norm_matrix = energy_norm_matrix(mesh)
        self._op = _HybridOperator(mesh, params0)
        self._warm = {}
        self.newton = NewtonConfig(atol=1e-10, rtol=1e-10, max_iterations=40)

    def _solve(self, theta, i):
        params = self.params0.with_flat(theta)
        g, _ = self.pairs[i]
        op = self._op
        op.params = params
        u = hybrid_extend_nonlinear(
            self.mesh, g, params, config=self.newton,
            x0=self._warm.get(i), operator=op,
        )
        self._warm[i] = u.coefficients.copy()
        return u

    def loss(self, theta) -> float:
        total = 0.0
        for i in range(len(self.pairs)):
            try:
                u = self._solve(theta, i)
            except NewtonError:
                return np.inf
            d = u.coefficients - self.pairs[i][1].coefficients
            total += float(d @ (self.norm_matrix @ d))
        total /= len(self.pairs)
        if self.cfg.regularization:
            total += self.cfg.regularization * float(np.dot(theta, theta))
        return total

    def gradient_fd(self, theta, step=None) -> np.ndarray:
        h = step or self.cfg.fd_step
        grad = np.empty(len(theta))
        for j in range(len(theta)):
            e = np.zeros(len(theta))
            e[j] = h
            grad[j] = (self.loss(theta + e) - self.loss(theta - e)) / (2.0 * h)
        return grad

    def gradient_adjoint(self, theta) -> np.ndarray:
        from .fem import DirectFactor

        params = self.params0.with_flat(theta)
        grad = np.zeros(len(theta))
        h = self.cfg.fd_step
        for i in range(len(self.pairs)):
            u = self._solve(theta, i)
            op = self._op
            _, J = op.callback(u.coefficients)
            d = u.coefficients - self.pairs[i][1].coefficients
            dl = 2.0 * (self.norm_matrix @ d)
            lam = DirectFactor(J.T.tocsr()).solve(op.free * dl)
            # dR/dtheta_j = sum_c (d alpha_c / d theta_j) (K_c u)|free
            _, _, s = op.coefficient_state(u.coefficients)
            ku = np.einsum("cab,cbk->cak", op.k_elem, op.gather(u.coefficients))
            lam_cells = lam.reshape(op.n, 2)[op.conn]  # (c, a, k)
            inner = np.einsum("cak,cak->c", lam_cells, ku)
            for j in range(len(theta)):
                e = np.zeros(len(theta))
                e[j] = h
                a_plus = alpha_eval(self.params0.with_flat(theta + e), s)
                a_minus = alpha_eval(self.params0.with_flat(theta - e), s)
                dalpha = (a_plus - a_minus) / (2.0 * h)
                grad[j] += -float(dalpha @ inner)
        grad /= len(self.pairs)
        if self.cfg.regularization:
            grad += 2.0 * self.cfg.regularization * theta
        return grad

    def gradient(self, theta) -> np.ndarray:
        if self.cfg.gradient_method == "adjoint":
            return self.gradient_adjoint(theta)
        return self.gradient_fd(theta)


def subsample_indices(n_data: int, n_target: int) -> np.ndarray:
    """Every floor(n_data / n_target)-th index (at least stride 1)."""
    stride = max(1, n_data // n_target)
    return np.arange(0, n_data, stride)


def train_hybrid(dataset, params0: IcnnParams, cfg: HybridTrainConfig):
    """L-BFGS fit of the coefficient network to biharmonic targets.

    ``dataset`` needs ``mesh``, ``train_indices`` and ``pair(i)``
    returning (boundary displacement, target field).  Returns the trained
    parameters, the loss history over accepted iterates, and the subsample
    indices actually used.
    """
    train_idx = np.asarray(dataset.train_indices)
    sel = train_idx[subsample_indices(len(train_idx), cfg.n_subsample)]
    pairs = [dataset.pair(i) for i in sel]
    problem = HybridLossProblem(dataset.mesh, pairs, params0, cfg)
    theta0 = params0.flatten()

    cache = {}
    history = []

    def fun(theta):
        val = problem.loss(theta)
        cache[theta.tobytes()] = val
        return val if np.isfinite(val) else 1e30

    def jac(theta):
        return problem.gradient(theta)

    history.append(problem.loss(theta0))

    def record(theta):
        val = cache.get(theta.tobytes())
        if val is None:
            val = problem.loss(theta)
        history.append(val)

    res = minimize(
        fun,
        theta0,
        jac=jac,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": cfg.max_iterations, "maxcor": cfg.history_size},
    )
    trained = params0.with_flat(res.x)
    return trained, history, sel
