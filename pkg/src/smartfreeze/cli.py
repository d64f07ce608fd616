"""Command-line surface: run experiments and baselines, export the
similarity matrix, and reproduce the layer-convergence CKA analysis."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, cohort, orchestrator
from .config import ExperimentConfig, build_model, parse_config
from .errors import SmartFreezeError
from .metrics import MetricsSink, write_summary


def _load_config(args) -> ExperimentConfig:
    from dataclasses import replace

    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.stage_cap is not None:
        cfg = replace(cfg, pace=replace(cfg.pace, stage_round_cap=args.stage_cap))
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with MetricsSink(out / "metrics.jsonl") as sink:
        report = orchestrator.run_experiment(cfg, sink=sink)
    write_summary(out / "summary.json", report.summary())
    print(f"final_accuracy={report.final_accuracy:.4f} rounds={len(report.records)}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with MetricsSink(out / "metrics.jsonl") as sink:
        report = orchestrator.run_baseline(args.kind, cfg, rounds=args.rounds, sink=sink)
    write_summary(out / "summary.json", report.summary())
    if report.memory_wall:
        print("memory wall: no client can train the full model; zero rounds run")
    else:
        print(f"final_accuracy={report.final_accuracy:.4f} rounds={len(report.records)}")
    return 0


def cmd_export_similarity(args) -> int:
    cfg = _load_config(args)
    sim = orchestrator.Simulation(cfg)
    sim.probe_and_cluster()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "similarity.csv", sim.omega, delimiter=",", fmt="%.10f")
    (out / "communities.json").write_text(
        json.dumps([list(c) for c in sim.communities.communities]) + "\n"
    )
    print(f"wrote {out / 'similarity.csv'} ({sim.omega.shape[0]} clients)")
    return 0


def cmd_analyze_cka(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = build_model(cfg.model)
    layers = model.layers
    sim = orchestrator.Simulation(cfg)
    reference = analysis.train_centralized(
        layers, sim.x_train, sim.y_train,
        epochs=args.reference_epochs, batch_size=cfg.training.batch_size,
        opt_cfg=cfg.optimizer, seed=cfg.seed,
    )
    checkpoint.save_checkpoint(out / "reference", checkpoint.params_to_tensors(reference))

    snapshots: list = []

    def hook(r, stage, stage_model):
        snapshots.append([
            ({k: v.copy() for k, v in p.items()} if p is not None else None)
            for p in stage_model.params
        ])

    orchestrator.run_baseline("fedavg_full", cfg, rounds=args.rounds, checkpoint_hook=hook)
    conv_layers = [i for i, l in enumerate(layers) if l.kind == "conv2d"]
    probe = sim.x_test[: min(256, len(sim.x_test))]
    series = analysis.cka_trace(layers, snapshots, reference, probe, conv_layers)
    result = {
        "layers": conv_layers,
        "cka": {str(i): series[i] for i in conv_layers},
        "stabilization_round": {
            str(i): analysis.stabilization_round(series[i]) for i in conv_layers
        },
    }
    (out / "cka.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    stab = result["stabilization_round"]
    print(" ".join(f"layer{i}:round{stab[str(i)]}" for i in conv_layers))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartfreeze")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--stage-cap", type=int, default=None)

    p = sub.add_parser("run", help="progressive training experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baseline", help="FedAvg / ExclusiveFL baseline")
    common(p)
    p.add_argument("--kind", choices=["fedavg_full", "exclusive_fl"], required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export-similarity", help="probe gradients and dump the similarity matrix")
    common(p)
    p.set_defaults(func=cmd_export_similarity)

    p = sub.add_parser("analyze-cka", help="layer-convergence CKA curves vs a centralized reference")
    common(p)
    p.add_argument("--rounds", type=int, default=40)
    p.add_argument("--reference-epochs", type=int, default=20)
    p.set_defaults(func=cmd_analyze_cka)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SmartFreezeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
