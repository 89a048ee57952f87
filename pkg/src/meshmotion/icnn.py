"""Input-convex scalar network and the diffusion coefficient built on it.

The network maps s >= 0 (the squared Frobenius norm of a gradient) to a
scalar through a softplus MLP whose effective weights are entrywise
squares of the raw parameters, hence non-negative; together with the
convex increasing activation this makes the map convex and non-decreasing
in s.  The coefficient

    alpha(theta, s) = 1 + smoothplus(s - eta1) * d/ds network(theta, s)
                        [+ smoothplus(s - eta2)]

is therefore >= 1 and non-decreasing, which is what makes the nonlinear
extension PDE uniquely solvable.  The optional second bump is off by
default.  smoothplus(t) = eps * ln(1 + exp(t / eps)).

The module also provides the exact shallow representation of convex
piecewise-affine functions in 1D and a fitting harness demonstrating that
nonnegative-combination shallow ReLU nets cannot approximate a particular
convex function of two variables while a two-hidden-layer net represents
it exactly.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MeshMotionError
from .optim import Adam


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def smoothplus(t, eps):
    """eps * ln(1 + exp(t/eps)), a smooth increasing max(t, 0)."""
    return eps * softplus(np.asarray(t, dtype=float) / eps)


@dataclass(frozen=True)
class IcnnParams:
    """Raw weights of the convex scalar network plus coefficient knobs.

    Effective weights are the entrywise squares of ``weights``; the output
    bias is fixed to zero (it does not appear in the derivative).
    """

    weights: tuple
    biases: tuple
    eta1: float = 0.01
    eta2: float = 10.0
    eps: float = 1e-3
    use_second_bump: bool = False

    def __post_init__(self):
        ws = tuple(np.asarray(W, dtype=float) for W in self.weights)
        bs = []
        for i, b in enumerate(self.biases):
            b = np.asarray(b, dtype=float).ravel()
            if i == len(self.biases) - 1 and np.any(b != 0.0):
                raise MeshMotionError("output-layer bias must be zero")
            bs.append(b)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", tuple(bs))
        if not (self.eta2 > self.eta1 > 0 and self.eps > 0):
            raise MeshMotionError("need eta2 > eta1 > 0 and eps > 0")
        for W, b in zip(ws, bs):
            if W.shape[0] != len(b):
                raise MeshMotionError("weight/bias shape mismatch")

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    def flatten(self) -> np.ndarray:
        """Trainable parameters as one vector (output bias excluded)."""
        parts = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            parts.append(W.ravel())
            if i < len(self.weights) - 1:
                parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "IcnnParams":
        theta = np.asarray(theta, dtype=float)
        ws, bs = [], []
        pos = 0
        for i, W in enumerate(self.weights):
            ws.append(theta[pos : pos + W.size].reshape(W.shape))
            pos += W.size
            if i < len(self.weights) - 1:
                b = self.biases[i]
                bs.append(theta[pos : pos + b.size])
                pos += b.size
            else:
                bs.append(np.zeros_like(self.biases[i]))
        if pos != len(theta):
            raise MeshMotionError("flat parameter length mismatch")
        return replace(self, weights=tuple(ws), biases=tuple(bs))

    @property
    def n_parameters(self) -> int:
        return len(self.flatten())

    def to_dict(self) -> dict:
        return {
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "eta1": self.eta1,
            "eta2": self.eta2,
            "eps": self.eps,
            "use_second_bump": self.use_second_bump,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IcnnParams":
        return cls(
            tuple(np.array(W) for W in d["weights"]),
            tuple(np.array(b) for b in d["biases"]),
            float(d["eta1"]),
            float(d["eta2"]),
            float(d["eps"]),
            bool(d.get("use_second_bump", False)),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "IcnnParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def zero_icnn(widths=(5, 5), **kwargs) -> IcnnParams:
    """All-zero raw weights: the coefficient collapses to 1."""
    dims = (1,) + tuple(widths) + (1,)
    ws = tuple(np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1))
    bs = tuple(np.zeros(dims[i + 1]) for i in range(len(dims) - 1))
    return IcnnParams(ws, bs, **kwargs)


def random_icnn(seed: int, widths=(5, 5), scale: float = 0.3, **kwargs) -> IcnnParams:
    """Seeded raw weights ~ N(0, scale^2); hidden biases too, output bias 0."""
    rng = np.random.Generator(np.random.Philox(seed))
    dims = (1,) + tuple(widths) + (1,)
    ws, bs = [], []
    for i in range(len(dims) - 1):
        ws.append(scale * rng.standard_normal((dims[i + 1], dims[i])))
        if i < len(dims) - 2:
            bs.append(scale * rng.standard_normal(dims[i + 1]))
        else:
            bs.append(np.zeros(dims[i + 1]))
    return IcnnParams(tuple(ws), tuple(bs), **kwargs)


def _forward_states(params: IcnnParams, s):
    s = np.atleast_1d(np.asarray(s, dtype=float))
    x = s[None, :]
    pre = []
    xs = [x]
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = (W * W) @ x + b[:, None]
        pre.append(a)
        x = a if i == len(params.weights) - 1 else softplus(a)
        xs.append(x)
    return xs, pre


def icnn_eval(params: IcnnParams, s):
    """Network value; scalar in, scalar out (vectorized over arrays)."""
    scalar = np.isscalar(s) or np.ndim(s) == 0
    xs, _ = _forward_states(params, s)
    out = xs[-1][0]
    return float(out[0]) if scalar else out


def icnn_derivative(params: IcnnParams, s):
    """d/ds of the network by the forward chain-rule recursion."""
    scalar = np.isscalar(s) or np.ndim(s) == 0
    xs, pre = _forward_states(params, s)
    y = np.ones((1, xs[0].shape[1]))
    for i, W in enumerate(params.weights):
        Wy = (W * W) @ y
        y = Wy if i == len(params.weights) - 1 else sigmoid(pre[i]) * Wy
    out = y[0]
    return float(out[0]) if scalar else out


def icnn_second_derivative(params: IcnnParams, s):
    """d2/ds2 of the network (needed for consistent PDE Jacobians)."""
    scalar = np.isscalar(s) or np.ndim(s) == 0
    xs, pre = _forward_states(params, s)
    y = np.ones((1, xs[0].shape[1]))
    z = np.zeros((1, xs[0].shape[1]))
    for i, W in enumerate(params.weights):
        W2 = W * W
        Wy = W2 @ y
        Wz = W2 @ z
        if i == len(params.weights) - 1:
            y, z = Wy, Wz
        else:
            sig = sigmoid(pre[i])
            z = sig * (1.0 - sig) * Wy * Wy + sig * Wz
            y = sig * Wy
    out = z[0]
    return float(out[0]) if scalar else out


def alpha_eval(params: IcnnParams, s):
    """Diffusion coefficient alpha(theta, s) >= 1."""
    scalar = np.isscalar(s) or np.ndim(s) == 0
    sv = np.atleast_1d(np.asarray(s, dtype=float))
    out = 1.0 + smoothplus(sv - params.eta1, params.eps) * icnn_derivative(params, sv)
    if params.use_second_bump:
        out = out + smoothplus(sv - params.eta2, params.eps)
    return float(out[0]) if scalar else out


def alpha_derivative(params: IcnnParams, s):
    """d alpha / d s (for Newton linearization of the extension PDE)."""
    scalar = np.isscalar(s) or np.ndim(s) == 0
    sv = np.atleast_1d(np.asarray(s, dtype=float))
    t = (sv - params.eta1) / params.eps
    out = sigmoid(t) * icnn_derivative(params, sv) + smoothplus(
        sv - params.eta1, params.eps
    ) * icnn_second_derivative(params, sv)
    if params.use_second_bump:
        out = out + sigmoid((sv - params.eta2) / params.eps)
    return float(out[0]) if scalar else out


# -- exact shallow representation in 1D --------------------------------------

@dataclass(frozen=True)
class ShallowReluNet:
    """c + sum_i ReLU(w_i . x + b_i); nonnegative combination folded in."""

    terms_w: np.ndarray  # (n_terms, d)
    terms_b: np.ndarray  # (n_terms,)
    offset: float

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pre = x @ np.atleast_2d(self.terms_w).T + self.terms_b
        return np.maximum(pre, 0.0).sum(axis=1) + self.offset

    @property
    def n_terms(self) -> int:
        return len(self.terms_b)


def represent_convex_pwl(breakpoints, slopes, value_at_leftmost) -> ShallowReluNet:
    """Exact shallow net for a convex piecewise-affine function of one variable.

    ``slopes`` (strictly increasing, one per piece) and ``breakpoints``
    (one fewer, increasing) define the function; ``value_at_leftmost`` is
    its value at the first breakpoint.  The function must be bounded below
    (first slope <= 0 <= last slope), otherwise no nonnegative combination
    of ReLU terms plus a constant can match its affine tails.
    """
    slopes = np.asarray(slopes, dtype=float).ravel()
    bps = np.asarray(breakpoints, dtype=float).ravel()
    if len(slopes) != len(bps) + 1:
        raise MeshMotionError("need one slope per piece (breakpoints + 1)")
    if len(bps) == 0:
        raise MeshMotionError("need at least one breakpoint")
    if np.any(np.diff(slopes) <= 0):
        raise MeshMotionError("slopes must be strictly increasing")
    if np.any(np.diff(bps) <= 0):
        raise MeshMotionError("breakpoints must be increasing")
    if slopes[0] > 0 or slopes[-1] < 0:
        raise MeshMotionError(
            "function is unbounded below; not representable with nonnegative terms"
        )
    neg = np.minimum(slopes, 0.0)
    pos = np.maximum(slopes, 0.0)
    ws, bs = [], []
    for j, xj in enumerate(bps):
        a_left = neg[j + 1] - neg[j]  # >= 0, hinge active left of xj
        if a_left > 0:
            ws.append(-a_left)
            bs.append(a_left * xj)
        a_right = pos[j + 1] - pos[j]  # >= 0, hinge active right of xj
        if a_right > 0:
            ws.append(a_right)
            bs.append(-a_right * xj)
    W = np.array(ws, dtype=float).reshape(-1, 1)
    b = np.array(bs, dtype=float)
    partial = ShallowReluNet(W, b, 0.0)
    offset = float(value_at_leftmost) - float(partial(np.array([[bps[0]]]))[0])
    return ShallowReluNet(W, b, offset)


# -- counterexample harness ----------------------------------------------------

def counterexample_target(x, y):
    """h(x, y) = max(max(x + y, 0), max(x - y, 0)) = ReLU(x + |y|)."""
    return np.maximum(np.maximum(x + y, 0.0), np.maximum(x - y, 0.0))


def depth2_exact_eval(x, y):
    """Two-hidden-layer ReLU identity reproducing the target exactly."""
    relu = lambda t: np.maximum(t, 0.0)
    return relu(x + relu(y) + relu(-y))


@dataclass(frozen=True)
class CounterexampleFit:
    """Fit report of the shallow-nonnegative vs deep comparison."""

    k: float
    sup_error_shallow: float
    sup_error_deep: float
    shallow_restarts: tuple
    deep_restarts: tuple
    sup_error_exact_depth2: float
    profile_alpha: np.ndarray = field(repr=False)
    profile_target: np.ndarray = field(repr=False)
    profile_shallow: np.ndarray = field(repr=False)
    profile_deep: np.ndarray = field(repr=False)


def _fit_shallow(X, target, n_units, iters, rng):
    W = rng.standard_normal((n_units, 2))
    b = 0.5 * rng.standard_normal(n_units)
    c = np.zeros(1)
    opt = Adam([W, b, c], lr=0.02)
    W, b, c = opt.params
    m = len(X)
    for it in range(iters):
        opt.lr = 0.02 if it < iters // 2 else 0.002
        pre = X @ W.T + b
        act = np.maximum(pre, 0.0)
        f = act.sum(axis=1) + c[0]
        df = 2.0 * (f - target) / m
        dpre = df[:, None] * (pre > 0)
        opt.step([dpre.T @ X, dpre.sum(axis=0), np.array([df.sum()])])
    pre = X @ W.T + b
    f = np.maximum(pre, 0.0).sum(axis=1) + c[0]
    return ShallowReluNet(W.copy(), b.copy(), float(c[0])), float(np.abs(f - target).max())


class _DeepNet:
    """Plain two-hidden-layer ReLU net with linear output."""

    def __init__(self, params):
        self.params = params  # [W1, b1, W2, b2, W3, b3]

    def __call__(self, X):
        W1, b1, W2, b2, W3, b3 = self.params
        h1 = np.maximum(X @ W1.T + b1, 0.0)
        h2 = np.maximum(h1 @ W2.T + b2, 0.0)
        return (h2 @ W3.T + b3)[:, 0]


def _fit_deep(X, target, width, iters, rng):
    W1 = rng.standard_normal((width, 2)) / np.sqrt(2.0)
    b1 = 0.1 * rng.standard_normal(width)
    W2 = rng.standard_normal((width, width)) / np.sqrt(width)
    b2 = 0.1 * rng.standard_normal(width)
    W3 = rng.standard_normal((1, width)) / np.sqrt(width)
    b3 = np.zeros(1)
    opt = Adam([W1, b1, W2, b2, W3, b3], lr=0.02)
    W1, b1, W2, b2, W3, b3 = opt.params
    m = len(X)
    for it in range(iters):
        opt.lr = 0.02 * 10.0 ** (-2.0 * it / max(iters - 1, 1))
        z1 = X @ W1.T + b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ W2.T + b2
        h2 = np.maximum(z2, 0.0)
        f = h2 @ W3.T[:, 0] + b3[0]
        df = 2.0 * (f - target) / m
        dW3 = (df @ h2)[None, :]
        db3 = np.array([df.sum()])
        dh2 = df[:, None] * W3
        dz2 = dh2 * (z2 > 0)
        dW2 = dz2.T @ h1
        db2 = dz2.sum(axis=0)
        dh1 = dz2 @ W2
        dz1 = dh1 * (z1 > 0)
        dW1 = dz1.T @ X
        db1 = dz1.sum(axis=0)
        opt.step([dW1, db1, dW2, db2, dW3, db3])
    net = _DeepNet([p.copy() for p in opt.params])
    return net, float(np.abs(net(X) - target).max())


def counterexample_fit(
    k: float,
    n_units: int = 32,
    restarts: int = 10,
    budget: int = 3000,
    seed: int = 0,
    grid_n: int = 100,
) -> CounterexampleFit:
    """Fit shallow-nonnegative and depth-2 ReLU nets to the target on [-k,k]^2.

    The shallow architecture folds the nonnegative combination into its
    terms, so any parameter value is an admissible nonnegative
    combination.  Reports best sup-norm errors over the grid across
    restarts, plus the error profile along the half-axis (alpha, 0).
    """
    if k <= 0:
        raise MeshMotionError("k must be positive")
    xs = np.linspace(-k, k, grid_n)
    X = np.column_stack([a.ravel() for a in np.meshgrid(xs, xs, indexing="ij")])
    target = counterexample_target(X[:, 0], X[:, 1])

    shallow_errs, deep_errs = [], []
    best_shallow, best_deep = None, None
    for r in range(restarts):
        rng = np.random.Generator(np.random.Philox([seed, r]))
        net_s, err_s = _fit_shallow(X, target, n_units, budget, rng)
        shallow_errs.append(err_s)
        if err_s == min(shallow_errs):
            best_shallow = net_s
        net_d, err_d = _fit_deep(X, target, max(4, n_units // 3), budget, rng)
        deep_errs.append(err_d)
        if err_d == min(deep_errs):
            best_deep = net_d

    exact_err = float(
        np.abs(depth2_exact_eval(X[:, 0], X[:, 1]) - target).max()
    )
    alphas = np.linspace(k / grid_n, k, grid_n)
    P = np.column_stack([alphas, np.zeros_like(alphas)])
    return CounterexampleFit(
        k=float(k),
        sup_error_shallow=float(min(shallow_errs)),
        sup_error_deep=float(min(deep_errs)),
        shallow_restarts=tuple(shallow_errs),
        deep_restarts=tuple(deep_errs),
        sup_error_exact_depth2=exact_err,
        profile_alpha=alphas,
        profile_target=counterexample_target(alphas, np.zeros_like(alphas)),
        profile_shallow=best_shallow(P),
        profile_deep=best_deep(P),
    )
