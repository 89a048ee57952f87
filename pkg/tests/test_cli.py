import hashlib
import json
import os

import numpy as np
import pytest

from meshmotion.cli import main
from meshmotion.extensions import BoundaryDisplacement
from meshmotion.geometry import channel_mesh
from meshmotion.icnn import random_icnn
from meshmotion.nncorr import mlp_init
from meshmotion.quality import scaled_jacobian
from meshmotion.mesh import Field, TriMesh
from conftest import flap_bend_g


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    mesh = channel_mesh(0.06)
    mesh.save(d / "mesh.json")
    BoundaryDisplacement.zero(mesh).save(d / "g_zero.json")
    flap_bend_g(mesh, 0.05).save(d / "g_bend.json")
    random_icnn(0, scale=0.4).save(d / "icnn.json")
    mlp_init(0, depth=2, width=8).save(d / "mlp.json")
    return d


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_extend_zero_displacement(workdir):
    out = workdir / "extend_zero"
    rc = main(["extend", "--mesh", str(workdir / "mesh.json"),
               "--g", str(workdir / "g_zero.json"), "--op", "harmonic",
               "--out", str(out)])
    assert rc == 0
    mesh = TriMesh.load(workdir / "mesh.json")
    field = Field.load(mesh, out / "field.json")
    assert np.abs(field.coefficients).max() == 0.0
    # min quality equals the undeformed mesh quality
    base = scaled_jacobian(mesh, Field.zeros(mesh, "P2", 2)).min_value
    rows = (out / "quality.csv").read_text().strip().split("\n")[1:]
    values = np.array([float(r.split(",")[1]) for r in rows])
    assert values.min() == pytest.approx(base, abs=1e-12)
    assert (out / "quality_hist.png").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert set(manifest["timings_ms"]) == {"assembly", "linear_solve", "nn_eval", "rest", "total"}


def test_extend_rerun_byte_identical(workdir):
    out1, out2 = workdir / "rr1", workdir / "rr2"
    args = ["extend", "--mesh", str(workdir / "mesh.json"),
            "--g", str(workdir / "g_bend.json"), "--op", "biharmonic"]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert digest(out1 / "field.json") == digest(out2 / "field.json")
    assert digest(out1 / "quality.csv") == digest(out2 / "quality.csv")


def test_extend_biharmonic_has_assembly_and_solve_phases(workdir):
    out = workdir / "rr1"  # produced above
    manifest = json.loads((out / "run_manifest.json").read_text())
    t = manifest["timings_ms"]
    assert t["assembly"] > 0.0
    assert t["linear_solve"] > 0.0
    assert t["total"] >= t["assembly"] + t["linear_solve"] - 1e-6


def test_extend_nncorr_reports_nn_phase(workdir):
    out = workdir / "extend_nncorr"
    rc = main(["extend", "--mesh", str(workdir / "mesh.json"),
               "--g", str(workdir / "g_bend.json"), "--op", "nncorr",
               "--params", str(workdir / "mlp.json"), "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["timings_ms"]["nn_eval"] > 0.0


def test_extend_hybrid_and_plaplace(workdir):
    for op in ("hybrid:nonlinear", "plaplace:3"):
        out = workdir / f"extend_{op.replace(':', '_')}"
        rc = main(["extend", "--mesh", str(workdir / "mesh.json"),
                   "--g", str(workdir / "g_bend.json"), "--op", op,
                   "--params", str(workdir / "icnn.json"), "--out", str(out)])
        assert rc == 0
        assert (out / "field.json").exists()


def test_unknown_operator_is_usage_error(workdir):
    rc = main(["extend", "--mesh", str(workdir / "mesh.json"),
               "--g", str(workdir / "g_zero.json"), "--op", "warp",
               "--out", str(workdir / "bad")])
    assert rc == 2


def test_missing_params_is_usage_error(workdir):
    rc = main(["extend", "--mesh", str(workdir / "mesh.json"),
               "--g", str(workdir / "g_zero.json"), "--op", "hybrid:auto",
               "--out", str(workdir / "bad2")])
    assert rc == 2


@pytest.fixture(scope="module")
def gen_config(workdir):
    cfg = {
        "configs": [
            {"f_tip": 0.6e3, "f_side": -0.6e3, "phase": -0.7853981633974483,
             "center": 0.4, "half_width": 0.02}
        ],
        "material": {"mu_s": 0.5e6, "lambda_s": 2.0e6},
        "n_amplitudes": 5,
        "mesh": {"kind": "channel", "h": 0.06},
        "solid": {"nx": 16, "ny": 2},
        "split": {"mode": "random", "fractions": [0.8, 0.2]},
    }
    path = workdir / "gen_config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_deterministic_manifest(workdir, gen_config):
    out1, out2 = workdir / "gen1", workdir / "gen2"
    assert main(["gen", "--config", str(gen_config), "--seed", "3", "--out", str(out1)]) == 0
    assert main(["gen", "--config", str(gen_config), "--seed", "3", "--out", str(out2)]) == 0
    assert digest(out1 / "dataset" / "manifest.json") == digest(out2 / "dataset" / "manifest.json")
    assert digest(out1 / "dataset" / "snapshot_00000.json") == digest(out2 / "dataset" / "snapshot_00000.json")


def test_gen_empty_configs_usage_error(workdir):
    bad = workdir / "bad_gen.json"
    bad.write_text(json.dumps({"configs": [], "material": {"mu_s": 1.0, "lambda_s": 1.0}}))
    assert main(["gen", "--config", str(bad), "--out", str(workdir / "genbad")]) == 2


def test_train_hybrid_echoes_n(workdir, gen_config):
    data = workdir / "gen1" / "dataset"
    cfg = workdir / "hybrid_train.json"
    cfg.write_text(json.dumps({"N": 20, "max_iterations": 2, "gradient": "adjoint"}))
    out = workdir / "train_hybrid"
    rc = main(["train", "hybrid", "--dataset", str(data), "--config", str(cfg),
               "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["N"] == 20
    assert (out / "params.json").exists()
    assert (out / "loss_history.csv").exists()
    assert (out / "loss_history.png").exists()


def test_train_nncorr_echoes_epochs(workdir, gen_config):
    data = workdir / "gen1" / "dataset"
    cfg = workdir / "nncorr_train.json"
    cfg.write_text(json.dumps({"epochs": 200, "depth": 2, "width": 8, "batch_size": 8}))
    out = workdir / "train_nncorr"
    rc = main(["train", "nncorr", "--dataset", str(data), "--config", str(cfg),
               "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["epochs"] == 200
    rows = (out / "loss_history.csv").read_text().strip().split("\n")
    assert rows[0] == "epoch,train_loss,val_loss,learning_rate"
    assert len(rows) == 201


def test_train_missing_dataset_usage_error(workdir):
    rc = main(["train", "hybrid", "--out", str(workdir / "nope")])
    assert rc == 2


def test_replay_zero_sequence_constant(workdir, gen_config):
    # build a zero-g dataset by hand
    from meshmotion.datagen import Snapshot, SnapshotSet

    mesh = TriMesh.load(workdir / "mesh.json")
    g = BoundaryDisplacement.zero(mesh)
    ds = SnapshotSet(mesh, [Snapshot(g=g) for _ in range(3)])
    ds_dir = workdir / "zero_ds"
    ds.save(ds_dir)
    out = workdir / "replay_zero"
    rc = main(["replay", "--dataset", str(ds_dir), "--op", "harmonic", "--out", str(out)])
    assert rc == 0
    rows = (out / "replay.csv").read_text().strip().split("\n")
    assert rows[0] == "step,min_quality,min_det"
    assert len(rows) == 4
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    assert np.all(data[:, 1] == data[0, 1])
    assert np.all(data[:, 2] == 1.0)


def test_replay_degeneration_footer(workdir):
    from meshmotion.datagen import Snapshot, SnapshotSet

    mesh = TriMesh.load(workdir / "mesh.json")
    amps = [0.05, 0.15, 0.3, 0.5]
    ds = SnapshotSet(mesh, [Snapshot(g=flap_bend_g(mesh, a)) for a in amps])
    ds_dir = workdir / "grow_ds"
    ds.save(ds_dir)
    out = workdir / "replay_grow"
    rc = main(["replay", "--dataset", str(ds_dir), "--op", "harmonic", "--out", str(out)])
    assert rc == 0
    text = (out / "replay.csv").read_text()
    lines = text.strip().split("\n")
    if "# degenerate_at=" in text:
        step = int(lines[-1].split("=")[1])
        assert len(lines) == step + 3  # header + rows through the step + footer
    else:
        assert len(lines) == len(amps) + 1


def test_replay_harmonic_degenerates_before_biharmonic(workdir):
    ds_dir = workdir / "grow_ds"
    out_h = workdir / "replay_h"
    out_b = workdir / "replay_b"
    assert main(["replay", "--dataset", str(ds_dir), "--op", "harmonic", "--out", str(out_h)]) == 0
    assert main(["replay", "--dataset", str(ds_dir), "--op", "biharmonic", "--out", str(out_b)]) == 0

    def steps(p):
        lines = (p / "replay.csv").read_text().strip().split("\n")
        data = [l for l in lines[1:] if not l.startswith("#")]
        return len(data)

    assert steps(out_h) <= steps(out_b)
