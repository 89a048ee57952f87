import numpy as np
import pytest

from meshmotion.datagen import Snapshot, SnapshotSet, split_dataset
from meshmotion.errors import MeshMotionError
from meshmotion.extensions import BoundaryDisplacement, harmonic_extend
from meshmotion.fem import apply_dirichlet, assemble_load, assemble_weighted_laplacian, clement_gradient
from meshmotion.mesh import Field
from meshmotion.nncorr import (
    MaskConfig,
    MlpParams,
    NNCorrTrainConfig,
    compute_mask,
    depth_width_table,
    hand_tuned_rhs,
    mlp_init,
    mlp_forward,
    mlp_param_count,
    nncorr_extend,
    seed_sweep,
    train_nncorr,
    zero_mlp,
)
from conftest import bump_g


# -- mask -----------------------------------------------------------------------

def test_mask_boundary_zero_interior_unit(square6):
    for rhs in ("constant", "hand-tuned"):
        mask = compute_mask(square6, MaskConfig(rhs=rhs))
        b = square6.boundary_vertex_set()
        interior = np.setdiff1d(np.arange(square6.n_vertices), b)
        v = mask.coefficients
        assert np.abs(v[b]).max() == 0.0
        assert v[interior].min() > 0.0
        assert v.max() == pytest.approx(1.0)


def test_hand_tuned_rhs_value():
    # direct evaluation: 2 (0+1)(1-0) e^0 + 0.1
    pts = np.array([[0.0, 0.3], [0.0, -2.0]])
    assert np.allclose(hand_tuned_rhs(pts), 2.1)


def test_mask_custom_rhs(square4):
    mask = compute_mask(square4, MaskConfig(rhs=lambda p: p[:, 0] + 0.5))
    assert mask.coefficients.max() == pytest.approx(1.0)


def test_mask_rejects_negative_rhs(square4):
    with pytest.raises(MeshMotionError):
        compute_mask(square4, MaskConfig(rhs=lambda p: -np.ones(len(p))))


def test_mask_unnormalized(square4):
    raw = compute_mask(square4, MaskConfig(rhs="constant", normalize=False))
    assert raw.coefficients.max() != pytest.approx(1.0)


# -- MLP ------------------------------------------------------------------------

def test_mlp_zero_weights_zero_output():
    p = zero_mlp(depth=2, width=8)
    assert np.array_equal(mlp_forward(p, np.arange(8.0)), np.zeros(2))


def test_mlp_hand_traced_single_hidden_layer():
    # 2 -> 2 -> 2 with explicit numbers, traced by hand:
    # z1 = W1 x + b1 = [(0.5*1 - 1*2 + 0.1), (2*1 + 0.5)] = [-1.4, 2.5]
    # h = relu(z1) = [0, 2.5];  out = W2 h + b2 = [2.5 - 0.2, -1.25 + 0.1]
    W1 = np.array([[0.5, -1.0], [2.0, 0.0]])
    b1 = np.array([0.1, 0.5])
    W2 = np.array([[0.0, 1.0], [0.0, -0.5]])
    b2 = np.array([-0.2, 0.1])
    p = MlpParams((W1, W2), (b1, b2), np.zeros(2), np.ones(2))
    out = mlp_forward(p, np.array([1.0, 2.0]))
    assert np.allclose(out, [2.3, -1.15], atol=1e-15)


def test_mlp_positive_homogeneity_zero_bias():
    rng = np.random.Generator(np.random.Philox(0))
    dims = [8, 16, 16, 2]
    ws = tuple(rng.standard_normal((b, a)) for a, b in zip(dims[:-1], dims[1:]))
    bs = tuple(np.zeros(b) for b in dims[1:])
    p = MlpParams(ws, bs, np.zeros(8), np.ones(8))
    x = rng.standard_normal(8)
    out1 = mlp_forward(p, x)
    out3 = mlp_forward(p, 3.0 * x)
    assert np.allclose(out3, 3.0 * out1, atol=1e-12)


def test_mlp_validation():
    with pytest.raises(MeshMotionError):
        MlpParams((np.zeros((4, 8)),), (np.zeros(4),), np.zeros(8), np.zeros(8))
    with pytest.raises(MeshMotionError):
        MlpParams((np.zeros((4, 8)), np.zeros((2, 5))), (np.zeros(4), np.zeros(2)),
                  np.zeros(8), np.ones(8))


def test_mlp_json_roundtrip(tmp_path):
    p = mlp_init(3, depth=2, width=8)
    path = tmp_path / "mlp.json"
    p.save(path)
    q = MlpParams.load(path)
    x = np.arange(8.0)
    assert np.array_equal(mlp_forward(p, x), mlp_forward(q, x))


def test_depth_width_table_matches_reference_counts():
    table = depth_width_table()
    counts = {d: c for d, _, c in table}
    assert counts == {2: 84066, 3: 84236, 4: 83987, 5: 83943, 6: 83970}
    base = mlp_param_count(6, 128)
    for _, _, c in table:
        assert abs(c - base) / base <= 0.005


# -- corrected extension ----------------------------------------------------------

def test_zero_network_equals_harmonic_exactly(square4):
    g = bump_g(square4, 0.1)
    mask = compute_mask(square4)
    u = nncorr_extend(square4, g, zero_mlp(depth=2, width=8), mask)
    uh = harmonic_extend(square4, g)
    assert np.array_equal(u.coefficients, uh.coefficients)


def test_boundary_exact_for_random_networks(square4):
    mask = compute_mask(square4)
    ids = square4.boundary_node_set("P2")
    for seed in range(10):
        g = bump_g(square4, 0.02 + 0.01 * seed)
        u = nncorr_extend(square4, g, mlp_init(seed, depth=2, width=16), mask)
        assert np.abs(u.node_values()[ids] - g.values).max() < 1e-12
        uh = harmonic_extend(square4, g)
        assert np.abs(u.coefficients - uh.coefficients).max() > 0  # net active


def test_pipeline_recomputed_independently(square4):
    """Dense hand pipeline: harmonic solve, patch averages, net trace, mask."""
    mesh = square4
    g = bump_g(mesh, 0.15)
    params = mlp_init(7, depth=2, width=8)
    mask = compute_mask(mesh)
    u = nncorr_extend(mesh, g, params, mask)

    # dense harmonic oracle
    w = Field(mesh, "DG0", 1, np.ones(mesh.n_cells))
    A = assemble_weighted_laplacian(mesh, w, 1, "P2").matrix
    n = mesh.n_nodes("P2")
    uh = np.zeros((n, 2))
    for d in range(2):
        A_c, rhs = apply_dirichlet(A, np.zeros(n), g.node_ids, g.values[:, d])
        uh[:, d] = np.linalg.solve(A_c.toarray(), rhs)

    # patch-averaged gradients by explicit loops
    verts, cells = mesh.vertices, mesh.cells
    grad_cell = np.zeros((mesh.n_cells, 2, 2))
    area = np.zeros(mesh.n_cells)
    conn = np.hstack([cells, mesh.n_vertices + mesh.cell_edges])
    from meshmotion.fem import cell_gradient_operator

    centroid = np.array([[1 / 3, 1 / 3]])
    gops = cell_gradient_operator(mesh, "P2", centroid)[:, 0]
    for c in range(mesh.n_cells):
        v = verts[cells[c]]
        d1, d2 = v[1] - v[0], v[2] - v[0]
        area[c] = 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])
        for a in range(6):
            grad_cell[c] += np.outer(uh[conn[c, a]], gops[c, a])
    grads = np.zeros((mesh.n_vertices, 2, 2))
    wsum = np.zeros(mesh.n_vertices)
    for c in range(mesh.n_cells):
        for lv in cells[c]:
            grads[lv] += area[c] * grad_cell[c]
            wsum[lv] += area[c]
    grads /= wsum[:, None, None]

    # explicit network trace with normalization
    def net(x):
        h = (x - params.mu) / params.sigma
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            h = W @ h + b
            if i < len(params.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    corr = np.zeros((mesh.n_vertices, 2))
    for v in range(mesh.n_vertices):
        feats = np.concatenate([verts[v], uh[v], grads[v].ravel()])
        corr[v] = mask.coefficients[v] * net(feats)

    expected = uh.copy()
    expected[: mesh.n_vertices] += corr
    mid = 0.5 * (corr[mesh.edges[:, 0]] + corr[mesh.edges[:, 1]])
    expected[mesh.n_vertices:] += mid
    assert np.abs(u.node_values() - expected).max() < 1e-10


# -- training ----------------------------------------------------------------------

def make_dataset(mesh, amplitudes, identical_targets=False):
    snaps = []
    for a in amplitudes:
        g = bump_g(mesh, a)
        uh = harmonic_extend(mesh, g)
        target = uh if identical_targets else None
        if target is None:
            from meshmotion.extensions import biharmonic_extend

            target = biharmonic_extend(mesh, g)
        snaps.append(Snapshot(g=g, u_harm=uh, clement=clement_gradient(uh), u_biharm=target))
    n = len(snaps)
    return SnapshotSet(mesh, snaps, split="random",
                       split_indices={"train": np.arange(n - 1), "val": np.array([n - 1])})


def test_targets_equal_inputs_zero_loss(square4):
    ds = make_dataset(square4, [0.05, 0.1, 0.15], identical_targets=True)
    cfg = NNCorrTrainConfig(batch_size=4, epochs=3, weight_decay=0.0, seed=0)
    params0 = zero_mlp(depth=2, width=8)
    params, history = train_nncorr(ds, params0, cfg)
    assert history[0][1] == 0.0  # training loss at the zero network
    assert history[-1][1] <= 1e-12


def test_training_reduces_loss_and_is_deterministic(square4):
    ds = make_dataset(square4, [0.05, 0.1, 0.15, 0.2])
    cfg = NNCorrTrainConfig(batch_size=4, epochs=40, learning_rate=3e-3, seed=1)
    p1, h1 = train_nncorr(ds, mlp_init(1, depth=2, width=16), cfg)
    p2, h2 = train_nncorr(ds, mlp_init(1, depth=2, width=16), cfg)
    losses = [r[1] for r in h1]
    assert losses[-1] < losses[0]
    assert losses[-1] <= 1.05 * min(losses)
    for W1, W2 in zip(p1.weights, p2.weights):
        assert np.array_equal(W1, W2)
    assert h1 == h2


def test_backprop_matches_fd(square4):
    """Central FD on 20 sampled weights.

    Samples whose l1 residual sign pattern changes inside the FD stencil
    are redrawn: the finite difference straddles a kink there and does not
    estimate the (sub)gradient the backward pass computes.
    """
    ds = make_dataset(square4, [0.06, 0.12, 0.18])
    mask = compute_mask(square4)
    params0 = mlp_init(5, depth=2, width=8)
    from meshmotion.nncorr import _backward, _forward_cached, _snapshot_arrays, normalization_stats
    from dataclasses import replace

    f, r = _snapshot_arrays(ds, [0, 1, 2])
    mu, sigma = normalization_stats(f.reshape(-1, 8))
    params = replace(params0, mu=mu, sigma=sigma)
    mask_v = mask.coefficients
    nf, nv, _ = f.shape

    def loss_and_signs(p):
        acts, pres = _forward_cached(p, f.reshape(nf * nv, -1))
        out = acts[-1].reshape(nf, nv, 2)
        resid = mask_v[None, :, None] * out - r
        pattern = [np.sign(resid)] + [z > 0 for z in pres[:-1]]
        return np.abs(resid).sum() / nf, pattern

    acts, pres = _forward_cached(params, f.reshape(nf * nv, -1))
    out = acts[-1].reshape(nf, nv, 2)
    resid = mask_v[None, :, None] * out - r
    dout = (mask_v[None, :, None] * np.sign(resid) / nf).reshape(nf * nv, 2)
    gw, gb = _backward(params, acts, pres, dout)

    rng = np.random.Generator(np.random.Philox(9))
    layers = list(params.weights)
    h = 1e-4
    checked = 0
    attempts = 0
    while checked < 20 and attempts < 200:
        attempts += 1
        li = int(rng.integers(len(layers)))
        W = layers[li]
        i = int(rng.integers(W.shape[0]))
        j = int(rng.integers(W.shape[1]))
        Wp = [w.copy() for w in layers]
        Wm = [w.copy() for w in layers]
        Wp[li][i, j] += h
        Wm[li][i, j] -= h
        lp, sp = loss_and_signs(replace(params, weights=tuple(Wp)))
        lm, sm = loss_and_signs(replace(params, weights=tuple(Wm)))
        if not all(np.array_equal(a, b) for a, b in zip(sp, sm)):
            continue
        fd = (lp - lm) / (2 * h)
        bp = gw[li][i, j]
        denom = max(abs(fd), 1e-8)
        assert abs(bp - fd) / denom < 1e-3
        checked += 1
    assert checked == 20


def test_split_conventions():
    # sequential 2400 -> 1800/200/400; random 606 -> 515/91
    mesh_small = __import__("meshmotion.geometry", fromlist=["unit_square_mesh"]).unit_square_mesh(1)
    g = BoundaryDisplacement.zero(mesh_small)
    snaps = [Snapshot(g=g) for _ in range(2400)]
    ds = SnapshotSet(mesh_small, snaps)
    seq = split_dataset(ds, "sequential")
    assert len(seq.train_indices) == 1800
    assert len(seq.val_indices) == 200
    assert len(seq.test_indices) == 400
    assert np.array_equal(seq.train_indices, np.arange(1800))

    snaps = [Snapshot(g=g) for _ in range(606)]
    ds = SnapshotSet(mesh_small, snaps)
    rnd = split_dataset(ds, "random", seed=3)
    assert len(rnd.train_indices) == 515
    assert len(rnd.val_indices) == 91
    rnd2 = split_dataset(ds, "random", seed=3)
    assert np.array_equal(rnd.train_indices, rnd2.train_indices)


def test_empty_training_split_rejected(square4):
    ds = make_dataset(square4, [0.05, 0.1])
    ds.split_indices = {"train": np.array([], dtype=np.int64), "val": np.array([0, 1])}
    with pytest.raises(MeshMotionError):
        train_nncorr(ds, mlp_init(0, depth=2, width=8), NNCorrTrainConfig(epochs=1))


def test_seed_sweep_structure(square4):
    ds = make_dataset(square4, [0.05, 0.1, 0.15])
    cfg = NNCorrTrainConfig(batch_size=4, epochs=3, seed=0)
    out = seed_sweep(
        ds, cfg, seeds=[0, 1], eval_g=[bump_g(square4, 0.1)],
        params_factory=lambda s: mlp_init(s, depth=2, width=8),
    )
    assert out["curves"].shape == (2, 1)
    assert out["median"].shape == (1,)
    assert np.all(out["q25"] <= out["q75"])
