"""Artificial training data from stationary hyperelastic solid solves.

A neo-Hookean flap clamped at the cylinder deforms under hand-picked
boundary loads whose amplitude is swept by cosine factors; each solid
boundary displacement is transferred to the fluid mesh and extended
harmonically (input) and biharmonically (target).  Snapshot sets carry
train/val/test splits and replay as a time-series stand-in.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import MeshMotionError, NewtonError
from .extensions import BoundaryDisplacement, biharmonic_extend, harmonic_extend
from .fem import (
    NewtonConfig,
    cell_connectivity,
    cell_geometry,
    cell_gradient_operator,
    clement_gradient,
    newton_solve,
    reference_basis,
    vector_dofs,
)
from .geometry import FLAP_END_X, FLAP_X0
from .mesh import Field, TriMesh
from .quadrature import edge_rule, triangle_rule
from .quality import cell_det_minima, scaled_jacobian


@dataclass(frozen=True)
class LoadConfig:
    """One base load configuration of the artificial family.

    ``f_tip`` acts vertically on the free end, scaled by cos(theta);
    ``f_side`` acts vertically on top and bottom where |x - center| <
    half_width, scaled by cos(theta - phase).
    """

    f_tip: float
    f_side: float
    phase: float = 0.0
    center: float = 0.4
    half_width: float = 0.02

    def __post_init__(self):
        if self.half_width <= 0:
            raise MeshMotionError("half_width must be positive")
        if not (FLAP_X0 <= self.center <= FLAP_END_X):
            raise MeshMotionError("load center outside the solid length")

    def to_dict(self):
        return {
            "f_tip": self.f_tip,
            "f_side": self.f_side,
            "phase": self.phase,
            "center": self.center,
            "half_width": self.half_width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["f_tip"], d["f_side"], d["phase"], d["center"], d["half_width"])


def table1_configs() -> tuple:
    """The six base load configurations of the artificial dataset."""
    f_tip = (1.925e3, 0.6e3, 1.4e3, 1.76e3, 0.53e3, 1.99e3)
    f_side = (-1.7e3, -0.6e3, -0.2e3, -0.66e3, 0.0, -1.94e3)
    phase = (0.0, -np.pi / 4, 0.0, 0.0, 0.0, 0.0)
    center = (0.4, 0.4, 0.5, 0.45, 0.45, 0.4)
    halfw = (0.02, 0.02, 0.04, 0.04, 0.04, 0.02)
    return tuple(
        LoadConfig(*args) for args in zip(f_tip, f_side, phase, center, halfw)
    )


@dataclass(frozen=True)
class Material:
    """Lame parameters of the solid (explicit inputs, no baked-in default)."""

    mu_s: float
    lambda_s: float

    def __post_init__(self):
        if self.mu_s <= 0 or self.lambda_s < 0:
            raise MeshMotionError("need mu_s > 0 and lambda_s >= 0")


# -- hyperelastic solid ------------------------------------------------------

class _SolidProblem:
    """Element data for the stationary compressible neo-Hookean solve."""

    def __init__(self, mesh: TriMesh, material: Material):
        self.mesh = mesh
        self.mat = material
        qpts, qw = triangle_rule(4)
        self.grads = cell_gradient_operator(mesh, "P2", qpts)  # (c,q,a,d)
        _, areas = cell_geometry(mesh)
        self.scale = qw[None, :] * areas[:, None]
        self.conn = cell_connectivity(mesh, "P2")
        self.n_loc = self.conn.shape[1]
        self.n = mesh.n_nodes("P2")
        self.vconn = 2 * np.repeat(self.conn, 2, axis=1) + np.tile([0, 1], self.n_loc)
        self._rows = np.repeat(self.vconn, 2 * self.n_loc, axis=1).ravel()
        self._cols = np.tile(self.vconn, (1, 2 * self.n_loc)).ravel()
        fixed = mesh.boundary_node_set("P2", ("attach",))
        self.free = np.ones(2 * self.n)
        self.free[vector_dofs(fixed, 2)] = 0.0

    def _kinematics(self, x):
        u = x.reshape(self.n, 2)[self.conn]  # (c, a, k)
        G = np.einsum("cqad,cak->cqkd", self.grads, u)
        F = G.copy()
        F[..., 0, 0] += 1.0
        F[..., 1, 1] += 1.0
        detF = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        return F, detF

    @staticmethod
    def _inv_transpose(F, detF):
        B = np.empty_like(F)
        B[..., 0, 0] = F[..., 1, 1]
        B[..., 0, 1] = -F[..., 1, 0]
        B[..., 1, 0] = -F[..., 0, 1]
        B[..., 1, 1] = F[..., 0, 0]
        return B / detF[..., None, None]

    def energy(self, x) -> float:
        """Stored strain energy; inf outside the det F > 0 domain."""
        F, detF = self._kinematics(x)
        if np.any(detF <= 0):
            return np.inf
        mu, lam = self.mat.mu_s, self.mat.lambda_s
        lnJ = np.log(detF)
        W = 0.5 * mu * (np.einsum("cqkd,cqkd->cq", F, F) - 2.0) - mu * lnJ + 0.5 * lam * lnJ**2
        return float(np.einsum("cq,cq->", self.scale, W))

    def internal_residual(self, x):
        """Gradient of the stored energy; NaN outside det F > 0."""
        F, detF = self._kinematics(x)
        if np.any(detF <= 0):
            return np.full(2 * self.n, np.nan)
        mu, lam = self.mat.mu_s, self.mat.lambda_s
        B = self._inv_transpose(F, detF)
        lnJ = np.log(detF)
        P = mu * F + (lam * lnJ - mu)[..., None, None] * B
        r_elem = np.einsum("cq,cqkd,cqad->cak", self.scale, P, self.grads, optimize=True)
        r = np.zeros((self.n, 2))
        np.add.at(r, self.conn.ravel(), r_elem.reshape(-1, 2))
        return r.ravel()

    def tangent(self, x):
        F, detF = self._kinematics(x)
        mu, lam = self.mat.mu_s, self.mat.lambda_s
        B = self._inv_transpose(F, detF)
        lnJ = np.log(detF)
        Bg = np.einsum("cqkd,cqad->cqak", B, self.grads)  # (B grad phi_a)_k
        gg = np.einsum("cq,cqad,cqbd->cab", self.scale, self.grads, self.grads, optimize=True)
        c1 = mu - lam * lnJ
        # slot (a,k,b,e): c1 (B grad_b)_k (B grad_a)_e + lam (B grad_b)_e (B grad_a)_k
        t1 = np.einsum("cq,cq,cqbk,cqae->cakbe", self.scale, c1, Bg, Bg, optimize=True)
        t2 = lam * np.einsum("cq,cqbe,cqak->cakbe", self.scale, Bg, Bg, optimize=True)
        elem = np.zeros((self.mesh.n_cells, 2 * self.n_loc, 2 * self.n_loc))
        for d in range(2):
            elem[:, d::2, d::2] += mu * gg
        elem += (t1 + t2).reshape(self.mesh.n_cells, 2 * self.n_loc, 2 * self.n_loc)
        J = sp.coo_matrix(
            (elem.ravel(), (self._rows, self._cols)), shape=(2 * self.n, 2 * self.n)
        ).tocsr()
        Pf = sp.diags(self.free)
        return (Pf @ J @ Pf + sp.diags(1.0 - self.free)).tocsr()


def traction_vector(mesh: TriMesh, load: LoadConfig, amplitude: float) -> np.ndarray:
    """Dead-load vector of the tip and side tractions at angle ``amplitude``."""
    tip_t = np.array([0.0, load.f_tip * np.cos(amplitude)])
    side_t = np.array([0.0, load.f_side * np.cos(amplitude - load.phase)])
    qt, qwt = edge_rule(3)
    basis_1d = np.array([(1 - qt) * (1 - 2 * qt), qt * (2 * qt - 1), 4 * qt * (1 - qt)])
    n = mesh.n_nodes("P2")
    b = np.zeros((n, 2))
    edge_ids = mesh._boundary_edge_global_ids()
    tags = mesh.tags
    for name, traction, windowed in (("tip", tip_t, False), ("top", side_t, True), ("bottom", side_t, True)):
        for idx in tags.get(name, []):
            v0, v1 = mesh.boundary_edges[idx]
            mid_node = mesh.n_vertices + edge_ids[idx]
            p0, p1 = mesh.vertices[v0], mesh.vertices[v1]
            length = float(np.hypot(*(p1 - p0)))
            xq = p0[0] + qt * (p1[0] - p0[0])
            active = (np.abs(xq - load.center) < load.half_width) if windowed else np.ones_like(xq, dtype=bool)
            w = qwt * active * length
            contrib = basis_1d @ w  # (3,)
            for node, c in zip((v0, v1, mid_node), contrib):
                b[node] += c * traction
    return b.ravel()


def _minimize_newton(problem: _SolidProblem, ext, x0, tol=1e-8, max_iter=100):
    """Newton on the potential energy with Armijo backtracking.

    The stationary solve minimizes stored energy minus the dead-load work;
    accepting steps on energy descent (rather than residual norm) is what
    keeps large bending steps from being rejected.
    """
    from .fem import DirectFactor

    x = x0.copy()
    for _ in range(max_iter):
        r = problem.free * (problem.internal_residual(x) - ext)
        rnorm = np.linalg.norm(r)
        if not np.isfinite(rnorm):
            raise NewtonError(np.inf, max_iter, "left the admissible det F > 0 set")
        if rnorm < tol:
            return x
        dx = DirectFactor(problem.tangent(x)).solve(-r)
        p0 = problem.energy(x) - ext @ x
        slope = float(r @ dx)
        step = 1.0
        for _ in range(40):
            x_trial = x + step * dx
            pt = problem.energy(x_trial) - ext @ x_trial
            if np.isfinite(pt) and pt <= p0 + 1e-4 * step * slope:
                break
            # near the solution the energy decrement drowns in roundoff;
            # fall back to plain residual decrease there
            rt = problem.free * (problem.internal_residual(x_trial) - ext)
            rt_norm = np.linalg.norm(rt)
            if np.isfinite(rt_norm) and rt_norm < rnorm:
                break
            step *= 0.5
        else:
            raise NewtonError(rnorm, max_iter, "energy linesearch stalled")
        x = x_trial
    raise NewtonError(rnorm, max_iter)


def neo_hookean_displacement(
    solid_mesh: TriMesh,
    load: LoadConfig,
    amplitude: float,
    material: Material,
    max_ramp_steps: int = 8,
) -> Field:
    """Stationary solid displacement under the configured tractions.

    Newton on the energy; if the full load does not converge, the load is
    ramped up with warm starts in at most ``max_ramp_steps`` increments.
    """
    problem = _SolidProblem(solid_mesh, material)
    full_load = traction_vector(solid_mesh, load, amplitude)
    try:
        x = _minimize_newton(problem, full_load, np.zeros(2 * problem.n))
    except NewtonError:
        n_steps = 2
        while True:
            try:
                x = np.zeros(2 * problem.n)
                for k in range(1, n_steps + 1):
                    x = _minimize_newton(problem, (k / n_steps) * full_load, x)
                break
            except NewtonError as exc:
                n_steps *= 2
                if n_steps > max_ramp_steps:
                    raise NewtonError(
                        exc.residual_norm, exc.iterations,
                        f"solid solve failed for load {load.to_dict()} "
                        f"at amplitude {amplitude:g}",
                    ) from exc
    return Field(solid_mesh, "P2", 2, x)


def solid_energy(solid_mesh: TriMesh, displacement: Field, material: Material) -> float:
    """Stored neo-Hookean strain energy of a displacement state."""
    return _SolidProblem(solid_mesh, material).energy(displacement.coefficients)


def solid_internal_forces(solid_mesh: TriMesh, displacement: Field, material: Material) -> np.ndarray:
    """Assembled residual of the strain energy (no tractions, no BC rows)."""
    return _SolidProblem(solid_mesh, material).internal_residual(displacement.coefficients)


def evaluate_field_at(field: Field, points: np.ndarray) -> np.ndarray:
    """Evaluate a P1/P2 field at arbitrary points by cell location.

    Points must lie inside (or on the boundary of) the mesh; the cell with
    the least-negative barycentric slack hosts each point.
    """
    mesh = field.mesh
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v0 = mesh.vertices[mesh.cells[:, 0]]
    J = np.empty((mesh.n_cells, 2, 2))
    J[:, :, 0] = mesh.vertices[mesh.cells[:, 1]] - v0
    J[:, :, 1] = mesh.vertices[mesh.cells[:, 2]] - v0
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / det
    inv[:, 0, 1] = -J[:, 0, 1] / det
    inv[:, 1, 0] = -J[:, 1, 0] / det
    inv[:, 1, 1] = J[:, 0, 0] / det
    # reference coords of every point in every cell: (n_p, n_c, 2)
    d = pts[:, None, :] - v0[None, :, :]
    ref = np.einsum("cij,pcj->pci", inv, d)
    slack = np.minimum(np.minimum(ref[..., 0], ref[..., 1]), 1.0 - ref.sum(axis=2))
    host = np.argmax(slack, axis=1)
    best = slack[np.arange(len(pts)), host]
    if np.any(best < -1e-8):
        raise MeshMotionError("point outside mesh in field evaluation")
    ref_host = np.clip(ref[np.arange(len(pts)), host], 0.0, 1.0)
    basis = reference_basis(field.space, ref_host)  # (n_loc, n_p)
    conn = cell_connectivity(mesh, field.space)[host]  # (n_p, n_loc)
    vals = field.node_values()[conn]  # (n_p, n_loc, dim)
    return np.einsum("ap,pak->pk", basis, vals)


def neo_hookean_solve(
    solid_mesh: TriMesh,
    load: LoadConfig,
    amplitude: float,
    material: Material,
    fluid_mesh: TriMesh,
) -> BoundaryDisplacement:
    """Solid solve followed by transfer to the fluid boundary.

    The solid boundary trace is evaluated at the fluid mesh's "moving"
    nodes; all other boundary nodes (walls, cylinder) get zero.
    """
    disp = neo_hookean_displacement(solid_mesh, load, amplitude, material)
    return solid_trace_on_fluid(disp, fluid_mesh)


def solid_trace_on_fluid(solid_displacement: Field, fluid_mesh: TriMesh) -> BoundaryDisplacement:
    ids = fluid_mesh.boundary_node_set("P2")
    vals = np.zeros((len(ids), 2))
    moving = fluid_mesh.boundary_node_set("P2", ("moving",))
    sel = np.isin(ids, moving)
    coords = fluid_mesh.node_coords("P2")[ids[sel]]
    vals[sel] = evaluate_field_at(solid_displacement, coords)
    return BoundaryDisplacement("P2", ids, vals)


# -- snapshot sets ------------------------------------------------------------

@dataclass
class Snapshot:
    g: BoundaryDisplacement
    u_harm: Field | None = None
    clement: Field | None = None
    u_biharm: Field | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class SnapshotSet:
    """Ordered snapshots over one mesh with split bookkeeping."""

    mesh: TriMesh
    snapshots: list
    split: str = "random"
    split_indices: dict = field(default_factory=dict)
    material: dict | None = None
    configs: list | None = None
    skipped: int = 0

    def __post_init__(self):
        for s in self.snapshots:
            for f in (s.u_harm, s.clement, s.u_biharm):
                if f is not None and f.mesh is not self.mesh:
                    raise MeshMotionError("snapshot field on a different mesh")
            if s.u_harm is not None and s.u_biharm is not None:
                if s.u_harm.space != s.u_biharm.space:
                    raise MeshMotionError("input/target space mismatch")

    def __len__(self):
        return len(self.snapshots)

    @property
    def train_indices(self):
        return np.asarray(self.split_indices.get("train", np.arange(len(self))))

    @property
    def val_indices(self):
        return np.asarray(self.split_indices.get("val", []), dtype=np.int64)

    @property
    def test_indices(self):
        return np.asarray(self.split_indices.get("test", []), dtype=np.int64)

    def pair(self, i: int):
        snap = self.snapshots[i]
        if snap.u_biharm is None:
            raise MeshMotionError(f"snapshot {i} has no target")
        return snap.g, snap.u_biharm

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.mesh.save(os.path.join(out_dir, "mesh.json"))
        names = []
        for i, s in enumerate(self.snapshots):
            rec = {"g": s.g.to_dict(), "meta": s.meta}
            for key, f in (("u_harm", s.u_harm), ("clement", s.clement), ("u_biharm", s.u_biharm)):
                if f is not None:
                    rec[key] = f.to_dict()
            name = f"snapshot_{i:05d}.json"
            with open(os.path.join(out_dir, name), "w") as fh:
                json.dump(rec, fh, sort_keys=True)
            names.append(name)
        manifest = {
            "mesh": "mesh.json",
            "snapshots": names,
            "split": self.split,
            "split_indices": {k: np.asarray(v).tolist() for k, v in self.split_indices.items()},
            "material": self.material,
            "configs": self.configs,
            "skipped": self.skipped,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True)

    @classmethod
    def load(cls, out_dir) -> "SnapshotSet":
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        mesh = TriMesh.load(os.path.join(out_dir, manifest["mesh"]))
        snaps = []
        for name in manifest["snapshots"]:
            with open(os.path.join(out_dir, name)) as fh:
                rec = json.load(fh)
            snaps.append(
                Snapshot(
                    g=BoundaryDisplacement.from_dict(rec["g"]),
                    u_harm=Field.from_dict(mesh, rec["u_harm"]) if "u_harm" in rec else None,
                    clement=Field.from_dict(mesh, rec["clement"]) if "clement" in rec else None,
                    u_biharm=Field.from_dict(mesh, rec["u_biharm"]) if "u_biharm" in rec else None,
                    meta=rec.get("meta", {}),
                )
            )
        return cls(
            mesh,
            snaps,
            manifest["split"],
            {k: np.array(v, dtype=np.int64) for k, v in manifest["split_indices"].items()},
            manifest.get("material"),
            manifest.get("configs"),
            manifest.get("skipped", 0),
        )


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MESHMOTION_THREADS", "1")))
    except ValueError:
        return 1


def build_artificial_dataset(
    fluid_mesh: TriMesh,
    solid_mesh: TriMesh,
    configs,
    material: Material,
    n_amplitudes: int = 101,
    n_workers: int | None = None,
) -> SnapshotSet:
    """Solid sweep over all (config, amplitude) pairs with extensions attached.

    Amplitudes are ``n_amplitudes`` equally spaced angles in [0, 2 pi].
    Failed solid solves are skipped and counted, never fatal.
    """
    if not configs:
        raise MeshMotionError("need at least one load configuration")
    thetas = np.linspace(0.0, 2.0 * np.pi, n_amplitudes)
    jobs = [(ci, th) for ci, _ in enumerate(configs) for th in thetas]
    workers = n_workers or default_workers()

    def solve_job(job):
        ci, th = job
        try:
            disp = neo_hookean_displacement(solid_mesh, configs[ci], th, material)
            return solid_trace_on_fluid(disp, fluid_mesh)
        except NewtonError:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(solve_job, jobs))
    else:
        traces = [solve_job(j) for j in jobs]

    snaps = []
    skipped = 0
    for (ci, th), g in zip(jobs, traces):
        if g is None:
            skipped += 1
            continue
        u_harm = harmonic_extend(fluid_mesh, g)
        snaps.append(
            Snapshot(
                g=g,
                u_harm=u_harm,
                clement=clement_gradient(u_harm),
                u_biharm=biharmonic_extend(fluid_mesh, g),
                meta={"config": ci, "theta": float(th)},
            )
        )
    return SnapshotSet(
        fluid_mesh,
        snaps,
        split="random",
        material={"mu_s": material.mu_s, "lambda_s": material.lambda_s},
        configs=[c.to_dict() for c in configs],
        skipped=skipped,
    )


def split_dataset(dataset: SnapshotSet, mode: str, fractions=None, seed: int = 0) -> SnapshotSet:
    """Assign train/val/test indices.

    Sequential mode takes prefix/middle/suffix blocks (default
    0.75 / 1/12 / 1/6); random mode shuffles with the seeded generator
    (default 0.85 / 0.15 train/val).  The training block is floored and
    the remainder flows rightward (2400 sequential -> 1800/200/400;
    606 random -> 515/91).
    """
    n = len(dataset)
    if mode == "sequential":
        fractions = fractions or (0.75, 1.0 / 12.0, 1.0 / 6.0)
        order = np.arange(n)
    elif mode == "random":
        fractions = fractions or (0.85, 0.15)
        order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    else:
        raise MeshMotionError(f"unknown split mode {mode}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise MeshMotionError("split fractions must sum to 1")
    cums = np.cumsum(fractions[:-1])
    cuts = [int(np.floor(n * cums[0]))] + [int(round(n * c)) for c in cums[1:]]
    parts = np.split(order, cuts)
    names = ["train", "val", "test"][: len(parts)]
    indices = {}
    for name, part in zip(names, parts):
        if len(part) == 0:
            raise MeshMotionError(f"empty {name} split")
        indices[name] = np.asarray(part, dtype=np.int64)
    return replace(dataset, split=mode, split_indices=indices)


@dataclass(frozen=True)
class ReplayResult:
    """Per-step quality series; absent steps follow a degeneration."""

    min_quality: tuple
    min_det: tuple
    degenerate_at: int | None
    n_requested: int


def replay_sequence(dataset: SnapshotSet, stepper, stop_on_degenerate: bool = True) -> ReplayResult:
    """Apply a (stateful) extension closure to each snapshot in order.

    ``stepper(mesh, g, state) -> (Field, state)``.  Records the minimum
    scaled Jacobian and minimum sampled determinant per step; a negative
    determinant (or an operator failure) ends the series, remaining steps
    stay absent.
    """
    mesh = dataset.mesh
    state = None
    qualities, dets = [], []
    degenerate_at = None
    for i, snap in enumerate(dataset.snapshots):
        try:
            u, state = stepper(mesh, snap.g, state)
        except MeshMotionError:
            degenerate_at = i
            break
        report = scaled_jacobian(mesh, u)
        min_det = float(cell_det_minima(mesh, u).min())
        qualities.append(report.min_value)
        dets.append(min_det)
        if min_det <= 0.0 and stop_on_degenerate:
            degenerate_at = i
            break
    return ReplayResult(tuple(qualities), tuple(dets), degenerate_at, len(dataset))
