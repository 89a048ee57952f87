"""Harmonic extension corrected by a pointwise neural network.

The correction MLP sees, per mesh vertex, the coordinates, the harmonic
extension value and its recovered gradient (8 features) and outputs a
2-vector that is multiplied by a mask vanishing on the boundary, so the
extended field keeps the boundary data exactly no matter what the network
does.  The mask solves a Poisson problem with a positive right-hand side
on a Delaunay mesh, which keeps it strictly positive in the interior.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import MaskPositivityError, MeshMotionError
from .extensions import BoundaryDisplacement, harmonic_extend
from .fem import DirectFactor, apply_dirichlet, assemble_load, assemble_weighted_laplacian, clement_gradient
from .mesh import Field, TriMesh
from .optim import Adam, ReduceOnPlateau
from .timing import NULL_TIMER

N_FEATURES = 8


@dataclass(frozen=True)
class MaskConfig:
    """Right-hand side choice for the boundary-vanishing mask solve."""

    rhs: object = "constant"  # "constant" | "hand-tuned" | callable(points)->values
    normalize: bool = True


def hand_tuned_rhs(points: np.ndarray) -> np.ndarray:
    """Source concentrating mask curvature left of the flap region."""
    x = points[:, 0]
    return 2.0 * (x + 1.0) * (1.0 - x) * np.exp(-3.5 * x**7) + 0.1


def compute_mask(mesh: TriMesh, cfg: MaskConfig = MaskConfig(), timer=NULL_TIMER) -> Field:
    """P1 solve of -lap(l) = f, l = 0 on the boundary, scaled to max 1.

    The right-hand side must be nonnegative and not identically zero; on a
    Delaunay (or weakly acute) mesh the discrete maximum principle then
    keeps every interior nodal value strictly positive, which is checked.
    """
    if cfg.rhs == "constant":
        rhs_fn = lambda p: np.ones(len(p))
    elif cfg.rhs == "hand-tuned":
        area = mesh.cell_areas().sum()
        raw = assemble_load(mesh, "P1", lambda p: hand_tuned_rhs(p)[:, None], 1)
        integral = raw.sum()  # integral of f over the domain
        c = area / integral
        rhs_fn = lambda p: c * hand_tuned_rhs(p)
    elif callable(cfg.rhs):
        rhs_fn = cfg.rhs
    else:
        raise MeshMotionError(f"unknown mask rhs {cfg.rhs!r}")

    with timer.section("assembly"):
        b = assemble_load(mesh, "P1", lambda p: np.asarray(rhs_fn(p)).reshape(-1, 1), 1)
        if np.any(b < -1e-14) or not np.any(b > 0):
            raise MeshMotionError("mask rhs must be nonnegative and not identically zero")
        weight = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
        A = assemble_weighted_laplacian(mesh, weight, 1, "P1").matrix
        bverts = mesh.boundary_vertex_set()
        A_c, b_c = apply_dirichlet(A, b, bverts, np.zeros(len(bverts)))
    with timer.section("linear_solve"):
        values = DirectFactor(A_c).solve_refined(b_c)
    interior = np.setdiff1d(np.arange(mesh.n_vertices), bverts)
    bad = interior[values[interior] <= 0.0]
    if bad.size:
        v = int(bad[0])
        raise MaskPositivityError(v, float(values[v]))
    if cfg.normalize:
        values = values / values.max()
    return Field(mesh, "P1", 1, values)


@dataclass(frozen=True)
class MlpParams:
    """ReLU MLP weights plus the fixed input-normalization statistics."""

    weights: tuple
    biases: tuple
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        ws = tuple(np.asarray(W, dtype=float) for W in self.weights)
        bs = tuple(np.asarray(b, dtype=float).ravel() for b in self.biases)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).ravel())
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float).ravel())
        if np.any(self.sigma <= 0):
            raise MeshMotionError("normalization sigma must be positive")
        if len(self.mu) != ws[0].shape[1] or len(self.sigma) != len(self.mu):
            raise MeshMotionError("normalization statistics do not match input width")
        for i, (W, b) in enumerate(zip(ws, bs)):
            if W.shape[0] != len(b):
                raise MeshMotionError("weight/bias shape mismatch")
            if i and W.shape[1] != ws[i - 1].shape[0]:
                raise MeshMotionError("layer dimensions do not chain")

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_parameters(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        return cls(
            tuple(np.array(W) for W in d["weights"]),
            tuple(np.array(b) for b in d["biases"]),
            np.array(d["mu"]),
            np.array(d["sigma"]),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "MlpParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def mlp_init(seed: int, depth: int = 6, width: int = 128,
             in_dim: int = N_FEATURES, out_dim: int = 2) -> MlpParams:
    """He-initialized network with identity normalization statistics."""
    rng = np.random.Generator(np.random.Philox(seed))
    dims = [in_dim] + [width] * depth + [out_dim]
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((b, a)) * np.sqrt(2.0 / a))
        bs.append(np.zeros(b))
    return MlpParams(tuple(ws), tuple(bs), np.zeros(in_dim), np.ones(in_dim))


def zero_mlp(depth: int = 6, width: int = 128, in_dim: int = N_FEATURES, out_dim: int = 2) -> MlpParams:
    dims = [in_dim] + [width] * depth + [out_dim]
    ws = tuple(np.zeros((b, a)) for a, b in zip(dims[:-1], dims[1:]))
    bs = tuple(np.zeros(b) for b in dims[1:])
    return MlpParams(ws, bs, np.zeros(in_dim), np.ones(in_dim))


def mlp_param_count(depth: int, width: int, in_dim: int = N_FEATURES, out_dim: int = 2) -> int:
    dims = [in_dim] + [width] * depth + [out_dim]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def depth_width_table() -> tuple:
    """(depth, width, parameter count) ladder of equal-size architectures."""
    return tuple(
        (d, w, mlp_param_count(d, w)) for d, w in ((2, 284), (3, 202), (4, 165), (5, 143), (6, 128))
    )


def _forward_cached(params: MlpParams, features: np.ndarray):
    x = (features - params.mu) / params.sigma
    pres, acts = [], [x]
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ W.T + b
        pres.append(z)
        acts.append(z if i == len(params.weights) - 1 else np.maximum(z, 0.0))
    return acts, pres


def mlp_forward(params: MlpParams, features) -> np.ndarray:
    """Normalize the 8 input features and run the ReLU stack."""
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    out = _forward_cached(params, feats)[0][-1]
    return out[0] if np.ndim(features) == 1 else out


def _backward(params: MlpParams, acts, pres, dout):
    grads_W, grads_b = [], []
    delta = dout
    for i in reversed(range(len(params.weights))):
        grads_W.append(delta.T @ acts[i])
        grads_b.append(delta.sum(axis=0))
        if i:
            delta = delta @ params.weights[i]
            delta = delta * (pres[i - 1] > 0)
    return list(reversed(grads_W)), list(reversed(grads_b))


def vertex_features(mesh: TriMesh, u_harm: Field, grad: Field) -> np.ndarray:
    """Per-vertex (x, y, u1, u2, du1/dx, du1/dy, du2/dx, du2/dy)."""
    return np.hstack([mesh.vertices, u_harm.vertex_values(), grad.vertex_values()])


def embed_p1_to_p2(mesh: TriMesh, vertex_values: np.ndarray) -> np.ndarray:
    """Linear interpolation into edge midpoints; returns P2 coefficients."""
    mid = 0.5 * (vertex_values[mesh.edges[:, 0]] + vertex_values[mesh.edges[:, 1]])
    return np.vstack([vertex_values, mid]).ravel()


def nncorr_extend(
    mesh: TriMesh,
    g: BoundaryDisplacement,
    params: MlpParams,
    mask: Field,
    timer=NULL_TIMER,
    u_harm: Field | None = None,
    grad: Field | None = None,
) -> Field:
    """Harmonic extension plus masked pointwise network correction.

    The correction is built at vertices, multiplied by the mask (zero on
    the boundary, so the trace of the result is exactly g) and embedded
    into P2 by midpoint interpolation.  Precomputed ``u_harm``/``grad``
    snapshots can be passed to skip the solve.
    """
    if mask.space != "P1" or mask.value_dim != 1:
        raise MeshMotionError("mask must be a scalar P1 field")
    if u_harm is None:
        u_harm = harmonic_extend(mesh, g, timer=timer)
    with timer.section("nn_eval"):
        if grad is None:
            grad = clement_gradient(u_harm)
        feats = vertex_features(mesh, u_harm, grad)
        correction = mask.coefficients[:, None] * mlp_forward(params, feats)
        coeffs = embed_p1_to_p2(mesh, correction)
    return u_harm.with_coefficients(u_harm.coefficients + coeffs)


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class NNCorrTrainConfig:
    batch_size: int = 128
    epochs: int = 200
    weight_decay: float = 0.01
    learning_rate: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise MeshMotionError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise MeshMotionError("weight decay must be >= 0")


def normalization_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise mean and standard deviation with a positivity floor."""
    mu = features.mean(axis=0)
    sigma = features.std(axis=0)
    return mu, np.maximum(sigma, 1e-8)


def _snapshot_arrays(dataset, indices):
    feats, residue = [], []
    mesh = dataset.mesh
    for i in indices:
        snap = dataset.snapshots[i]
        if snap.u_harm is None or snap.clement is None or snap.u_biharm is None:
            raise MeshMotionError("snapshot lacks harmonic input / target data")
        feats.append(vertex_features(mesh, snap.u_harm, snap.clement))
        residue.append(snap.u_biharm.vertex_values() - snap.u_harm.vertex_values())
    return np.array(feats), np.array(residue)


def train_nncorr(dataset, params0: MlpParams, cfg: NNCorrTrainConfig, mask: Field | None = None):
    """Fit the correction network to biharmonic targets.

    Minimizes the vertexwise l1 mismatch summed over vertices (averaged
    over the snapshots of a batch) with decoupled weight decay and
    plateau-halved learning rate on the validation loss.  Normalization
    statistics come from the training split and stay frozen afterwards.
    Returns (trained params, history) where history rows are
    (epoch, train loss, validation loss, learning rate).
    """
    mesh = dataset.mesh
    if mask is None:
        mask = compute_mask(mesh)
    train_idx = np.asarray(dataset.train_indices)
    val_idx = np.asarray(dataset.val_indices)
    if len(train_idx) == 0:
        raise MeshMotionError("empty training split")
    mask_v = mask.coefficients
    f_train, r_train = _snapshot_arrays(dataset, train_idx)
    f_val, r_val = (
        _snapshot_arrays(dataset, val_idx) if len(val_idx) else (None, None)
    )

    mu, sigma = normalization_stats(f_train.reshape(-1, f_train.shape[-1]))
    params = replace(params0, mu=mu, sigma=sigma)

    opt = Adam(
        [p.copy() for p in params.weights] + [b.copy() for b in params.biases],
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )
    n_layers = len(params.weights)
    scheduler = ReduceOnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
    rng = np.random.Generator(np.random.Philox(cfg.seed))

    def current_params():
        return replace(
            params,
            weights=tuple(opt.params[:n_layers]),
            biases=tuple(opt.params[n_layers:]),
        )

    def batch_loss_grad(p, feats, residue, with_grad=True):
        nf, nv, _ = feats.shape
        acts, pres = _forward_cached(p, feats.reshape(nf * nv, -1))
        out = acts[-1].reshape(nf, nv, 2)
        r = mask_v[None, :, None] * out - residue
        loss = np.abs(r).sum() / nf
        if not with_grad:
            return loss, None
        dout = (mask_v[None, :, None] * np.sign(r) / nf).reshape(nf * nv, 2)
        gw, gb = _backward(p, acts, pres, dout)
        return loss, gw + gb

    def split_loss(p, feats, residue):
        return batch_loss_grad(p, feats, residue, with_grad=False)[0]

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            p = current_params()
            loss, grads = batch_loss_grad(p, f_train[sel], r_train[sel])
            opt.step(grads)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / n_batches
        val_loss = (
            split_loss(current_params(), f_val, r_val) if f_val is not None else train_loss
        )
        scheduler.step(val_loss)
        history.append((epoch, train_loss, val_loss, opt.lr))
    return current_params(), history


def seed_sweep(dataset, cfg: NNCorrTrainConfig, seeds, eval_g, mask: Field | None = None,
               params_factory=None):
    """Train one network per seed and report quality quantiles.

    ``eval_g`` is a list of boundary displacements; for each trained
    network the minimum scaled Jacobian per evaluation snapshot forms a
    curve, and the 25/50/75 percent quantiles across seeds are reported.
    """
    from dataclasses import replace as dc_replace

    from .quality import scaled_jacobian

    mesh = dataset.mesh
    if mask is None:
        mask = compute_mask(mesh)
    factory = params_factory or (lambda s: mlp_init(s))
    curves = []
    for s in seeds:
        params, _ = train_nncorr(dataset, factory(s), dc_replace(cfg, seed=int(s)), mask)
        row = []
        for g in eval_g:
            u = nncorr_extend(mesh, g, params, mask)
            row.append(scaled_jacobian(mesh, u).min_value)
        curves.append(row)
    curves = np.array(curves)
    return {
        "curves": curves,
        "median": np.quantile(curves, 0.5, axis=0),
        "q25": np.quantile(curves, 0.25, axis=0),
        "q75": np.quantile(curves, 0.75, axis=0),
    }
