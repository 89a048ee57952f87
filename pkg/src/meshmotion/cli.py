"""Command-line entry point.

Subcommands: ``extend`` (apply one operator to one boundary displacement),
``gen`` (build the artificial dataset), ``train`` (fit either learned
operator), ``replay`` (run an operator over a snapshot sequence).  Every
command writes its primary outputs plus a run manifest with per-phase
wall-clock timings; rerunning with the same inputs and seed reproduces
the primary outputs byte for byte (timings are excluded from hashing).
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import datagen, geometry, reports
from .errors import MeshMotionError, UsageError
from .extensions import (
    BoundaryDisplacement,
    ElasticStiffnessConfig,
    biharmonic_extend,
    elastic_extend,
    harmonic_extend,
    p_laplace_extend,
)
from .hybrid import (
    HybridState,
    HybridTrainConfig,
    StrategyConfig,
    hybrid_extend_auto,
    hybrid_extend_nonlinear,
    train_hybrid,
)
from .icnn import IcnnParams, random_icnn
from .mesh import Field, TriMesh
from .nncorr import (
    MaskConfig,
    MlpParams,
    NNCorrTrainConfig,
    compute_mask,
    mlp_init,
    nncorr_extend,
    train_nncorr,
)
from .quality import scaled_jacobian, sign_degenerate
from .timing import PhaseTimer


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc}") from exc


def _write_manifest(out_dir, command, config_echo, inputs, outputs, seed, timer):
    manifest = {
        "command": command,
        "config": config_echo,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seed": seed,
        "timings_ms": timer.phases_ms(),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest


def _parse_operator(spec: str, params_path, config, mesh, timer):
    """Build (stateless extend, stateful stepper) for an operator spec."""
    config = config or {}
    if spec == "harmonic":
        op = lambda m, g: harmonic_extend(m, g, timer=timer)
    elif spec == "biharmonic":
        op = lambda m, g: biharmonic_extend(m, g, timer=timer)
    elif spec.startswith("plaplace:"):
        try:
            p = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise UsageError(f"bad p-Laplace spec {spec!r}") from exc
        delta = float(config.get("delta", 1e-10))
        op = lambda m, g: p_laplace_extend(m, g, p, delta, timer=timer)
    elif spec == "elastic":
        cfg = ElasticStiffnessConfig(
            mu_max=float(config.get("mu_max", 25.0)),
            mu_min=float(config.get("mu_min", 1.0)),
            gamma_tag=config.get("gamma_tag", "moving"),
        )
        op = lambda m, g: elastic_extend(m, g, cfg, timer=timer)
    elif spec.startswith("hybrid"):
        if params_path is None:
            raise UsageError("hybrid operator needs --params")
        params = IcnnParams.load(params_path)
        strategy = spec.split(":", 1)[1] if ":" in spec else "nonlinear"
        aliases = {"incremental": "incremental-lagging"}
        strategy = aliases.get(strategy, strategy)
        scfg = StrategyConfig(
            strategy=strategy,
            threshold=float(config.get("threshold", 0.005)),
            probe=config.get("probe", "max"),
            probe_point=tuple(config["probe_point"]) if "probe_point" in config else None,
        )
        state_box = {"state": HybridState()}

        def op(m, g):
            u, state_box["state"] = hybrid_extend_auto(
                m, state_box["state"], g, params, scfg, timer=timer
            )
            return u

    elif spec == "nncorr":
        if params_path is None:
            raise UsageError("nncorr operator needs --params")
        params = MlpParams.load(params_path)
        mask_cfg = MaskConfig(rhs=config.get("mask_rhs", "constant"))
        mask = compute_mask(mesh, mask_cfg, timer=timer)
        op = lambda m, g: nncorr_extend(m, g, params, mask, timer=timer)
    else:
        raise UsageError(f"unknown operator spec {spec!r}")
    return op


def cmd_extend(args) -> int:
    if not args.mesh or not args.g or not args.op:
        raise UsageError("extend needs --mesh, --g and --op")
    os.makedirs(args.out, exist_ok=True)
    mesh = TriMesh.load(args.mesh)
    g = BoundaryDisplacement.load(args.g)
    config = _load_json(args.config) if args.config else {}
    timer = PhaseTimer()
    op = _parse_operator(args.op, args.params, config, mesh, timer)
    with timer.total():
        field = op(mesh, g)
        report = sign_degenerate(scaled_jacobian(mesh, field), mesh, field)

    field_path = os.path.join(args.out, "field.json")
    field.save(field_path)
    csv_path = os.path.join(args.out, "quality.csv")
    fig_path = os.path.join(args.out, "quality_hist.png")
    reports.write_quality_report(csv_path, fig_path, report)
    _write_manifest(
        args.out,
        "extend",
        {"op": args.op, **config},
        {"mesh": args.mesh, "g": args.g, "params": args.params},
        ["field.json", "quality.csv", "quality_hist.png"],
        args.seed,
        timer,
    )
    return 0


def _mesh_from_config(config, mesh_path):
    if mesh_path:
        return TriMesh.load(mesh_path)
    spec = config.get("mesh", {"kind": "benchmark", "refinement": 0})
    if spec.get("kind") == "channel":
        return geometry.channel_mesh(float(spec["h"]), seed=int(spec.get("seed", 0)))
    if spec.get("kind") == "benchmark":
        return geometry.benchmark_mesh(int(spec.get("refinement", 0)))
    raise UsageError(f"unknown mesh spec {spec!r}")


def cmd_gen(args) -> int:
    if not args.config:
        raise UsageError("gen needs --config")
    config = _load_json(args.config)
    raw_configs = config.get("configs", [])
    if not raw_configs:
        raise UsageError("empty load configuration list")
    if "material" not in config:
        raise UsageError("config must provide material {mu_s, lambda_s}")
    os.makedirs(args.out, exist_ok=True)
    timer = PhaseTimer()
    with timer.total():
        loads = [datagen.LoadConfig.from_dict(d) for d in raw_configs]
        material = datagen.Material(**config["material"])
        fluid = _mesh_from_config(config, args.mesh)
        solid_spec = config.get("solid", {"nx": 24, "ny": 2})
        solid = geometry.flap_solid_mesh(int(solid_spec["nx"]), int(solid_spec["ny"]))
        dataset = datagen.build_artificial_dataset(
            fluid, solid, loads, material,
            n_amplitudes=int(config.get("n_amplitudes", 101)),
        )
        split = config.get("split", {"mode": "random"})
        dataset = datagen.split_dataset(
            dataset, split.get("mode", "random"),
            fractions=tuple(split["fractions"]) if "fractions" in split else None,
            seed=args.seed,
        )
        data_dir = os.path.join(args.out, "dataset")
        dataset.save(data_dir)
    _write_manifest(
        args.out,
        "gen",
        config,
        {"config": args.config, "mesh": args.mesh},
        ["dataset"],
        args.seed,
        timer,
    )
    print(f"{len(dataset)} snapshots ({dataset.skipped} skipped)")
    return 0


def cmd_train(args) -> int:
    if not args.kind or not args.dataset:
        raise UsageError("train needs a kind (hybrid|nncorr) and --dataset")
    config = _load_json(args.config) if args.config else {}
    os.makedirs(args.out, exist_ok=True)
    dataset = datagen.SnapshotSet.load(args.dataset)
    timer = PhaseTimer()
    outputs = []
    if args.kind == "hybrid":
        cfg = HybridTrainConfig(
            n_subsample=int(config.get("N", 20)),
            regularization=float(config.get("lambda", 0.0)),
            max_iterations=int(config.get("max_iterations", 100)),
            gradient_method=config.get("gradient", "finite-difference"),
            fd_step=float(config.get("fd_step", 1e-6)),
            history_size=int(config.get("history_size", 10)),
        )
        params0 = random_icnn(
            args.seed,
            widths=tuple(config.get("widths", (5, 5))),
            scale=float(config.get("init_scale", 0.3)),
            eta1=float(config.get("eta1", 0.01)),
            eta2=float(config.get("eta2", 10.0)),
            eps=float(config.get("eps", 1e-3)),
        )
        with timer.total():
            params, history, subsample = train_hybrid(dataset, params0, cfg)
        params.save(os.path.join(args.out, "params.json"))
        rows = [(i, v) for i, v in enumerate(history)]
        reports.write_loss_report(
            os.path.join(args.out, "loss_history.csv"),
            os.path.join(args.out, "loss_history.png"),
            rows, ["iteration", "loss"],
        )
        outputs = ["params.json", "loss_history.csv", "loss_history.png"]
        echo = {"kind": "hybrid", "N": cfg.n_subsample, "lambda": cfg.regularization,
                "max_iterations": cfg.max_iterations, "gradient": cfg.gradient_method,
                "subsample_indices": np.asarray(subsample).tolist(), **config}
    elif args.kind == "nncorr":
        cfg = NNCorrTrainConfig(
            batch_size=int(config.get("batch_size", 128)),
            epochs=int(config.get("epochs", 200)),
            weight_decay=float(config.get("weight_decay", 0.01)),
            learning_rate=float(config.get("learning_rate", 1e-3)),
            plateau_factor=float(config.get("plateau_factor", 0.5)),
            plateau_patience=int(config.get("plateau_patience", 10)),
            seed=args.seed,
        )
        params0 = mlp_init(
            args.seed,
            depth=int(config.get("depth", 6)),
            width=int(config.get("width", 128)),
        )
        mask = compute_mask(dataset.mesh, MaskConfig(rhs=config.get("mask_rhs", "constant")))
        with timer.total():
            params, history = train_nncorr(dataset, params0, cfg, mask)
        params.save(os.path.join(args.out, "params.json"))
        reports.write_loss_report(
            os.path.join(args.out, "loss_history.csv"),
            os.path.join(args.out, "loss_history.png"),
            history, ["epoch", "train_loss", "val_loss", "learning_rate"],
        )
        outputs = ["params.json", "loss_history.csv", "loss_history.png"]
        echo = {"kind": "nncorr", "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "weight_decay": cfg.weight_decay, **config}
    else:
        raise UsageError(f"unknown training kind {args.kind!r}")
    _write_manifest(args.out, "train", echo, {"dataset": args.dataset}, outputs, args.seed, timer)
    return 0


def cmd_replay(args) -> int:
    if not args.dataset or not args.op:
        raise UsageError("replay needs --dataset and --op")
    config = _load_json(args.config) if args.config else {}
    os.makedirs(args.out, exist_ok=True)
    dataset = datagen.SnapshotSet.load(args.dataset)
    timer = PhaseTimer()
    op = _parse_operator(args.op, args.params, config, dataset.mesh, timer)

    def stepper(mesh, g, state):
        return op(mesh, g), state

    with timer.total():
        result = datagen.replay_sequence(dataset, stepper)
    reports.write_replay_report(
        os.path.join(args.out, "replay.csv"),
        os.path.join(args.out, "replay.png"),
        result,
    )
    _write_manifest(
        args.out, "replay", {"op": args.op, **config},
        {"dataset": args.dataset, "params": args.params},
        ["replay.csv", "replay.png"], args.seed, timer,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshmotion",
        description="Mesh-motion extension operators: classic and learned.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--mesh", help="mesh JSON file")
        p.add_argument("--g", help="boundary displacement JSON file")
        p.add_argument("--op", help="operator spec, e.g. harmonic, plaplace:4, hybrid:auto")
        p.add_argument("--params", help="learned parameters JSON file")
        p.add_argument("--config", help="configuration JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("extend", help="extend one boundary displacement"))
    common(sub.add_parser("gen", help="generate the artificial dataset"))
    p_train = sub.add_parser("train", help="train a learned operator")
    p_train.add_argument("kind", choices=["hybrid", "nncorr"])
    p_train.add_argument("--dataset", help="dataset directory")
    common(p_train)
    p_replay = sub.add_parser("replay", help="replay a snapshot sequence")
    p_replay.add_argument("--dataset", help="dataset directory")
    common(p_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "extend": cmd_extend,
        "gen": cmd_gen,
        "train": cmd_train,
        "replay": cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except MeshMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
