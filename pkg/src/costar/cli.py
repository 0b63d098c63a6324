"""The ``costar`` command line: simulation, training, evaluation, reports.

Subcommands: ``simulate`` writes a dataset file plus metadata sidecar;
``pretrain`` produces an encoder checkpoint from contrastive pretraining;
``train`` fine-tunes an encoder checkpoint (or a fresh encoder) into a full
outcome model; ``evaluate`` runs a whole experiment protocol and emits a
metrics report; ``theory-check`` runs one randomized verification suite;
``report`` re-renders a stored report. Relative data paths resolve against
``$COSTAR_DATA_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    apply_normalization,
    fit_normalization,
    load_dataset,
    save_dataset,
)
from .decoder import TrainConfig, finetune, save_model
from .encoder import EncoderConfig, HistoryEncoder, load_checkpoint
from .harness import ExperimentConfig, emit_report, load_report, run_experiment
from .pkpd import DomainSpec, generate_domain_dataset
from .pretrain import SSLConfig, pretrain_to_checkpoint
from .theory import SUITE_NAMES, run_suite

DATA_DIR_ENV = "COSTAR_DATA_DIR"


def resolve_path(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def set_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(resolve_path(path)).read_text()
    loaded = yaml.safe_load(text)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise SystemExit(f"config file {path} must contain a mapping")
    return loaded


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value (YAML) configuration file")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument(
        "--deterministic", action="store_true", help="force deterministic torch kernels"
    )
    common.add_argument("--out", help="output path (file or directory, command-specific)")
    return common


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        n_train, n_val, n_test = (int(x) for x in args.splits.split(","))
    except ValueError:
        raise SystemExit(f"--splits must be three comma-separated integers, got {args.splits!r}")
    spec = DomainSpec(
        gamma=args.gamma,
        horizon=args.horizon,
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        seed=args.seed,
    )
    dataset = generate_domain_dataset(spec, domain=args.domain)
    out = resolve_path(args.out)
    if out is None:
        raise SystemExit("simulate requires --out PATH")
    path = save_dataset(dataset, out)
    print(f"wrote {len(dataset.trajectories)} trajectories to {path}")
    print(f"splits: {dataset.split_sizes()}, gamma={spec.gamma}, horizon={spec.horizon}")
    return 0


def _normalized_splits(dataset):
    stats = dataset.norm_stats
    if dataset.normalized:
        if stats is None:
            raise SystemExit("normalized dataset is missing its normalization sidecar stats")
        train = dataset.split("train")
        val = dataset.split("val")
        return train, val, stats
    if stats is None:
        stats = fit_normalization(dataset.split("train"))
    train = [apply_normalization(t, stats) for t in dataset.split("train")]
    val = [apply_normalization(t, stats) for t in dataset.split("val")]
    return train, val, stats


def cmd_pretrain(args: argparse.Namespace) -> int:
    if args.deterministic:
        set_deterministic()
    dataset = load_dataset(resolve_path(args.data))
    train, val, stats = _normalized_splits(dataset)
    overrides = load_config_file(args.config)
    config = SSLConfig.from_dict({"seed": args.seed, **overrides})
    torch.manual_seed(config.seed)
    encoder = HistoryEncoder(EncoderConfig(**overrides.get("encoder", {})))
    out = resolve_path(args.out)
    if out is None:
        raise SystemExit("pretrain requires --out CKPT")
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    path = pretrain_to_checkpoint(encoder, train, val, config, out, log_path=log_path)
    # stash the statistics so training reuses them instead of refitting
    payload = torch.load(path, weights_only=False)
    payload["extra"]["norm_stats"] = stats.to_dict()
    torch.save(payload, path)
    print(f"wrote encoder checkpoint to {path}; step log at {log_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    if args.deterministic:
        set_deterministic()
    dataset = load_dataset(resolve_path(args.data))
    overrides = load_config_file(args.config)
    if args.encoder:
        encoder, extra = load_checkpoint(resolve_path(args.encoder))
        stats_dict = extra.get("norm_stats")
    else:
        encoder, stats_dict = HistoryEncoder(EncoderConfig(**overrides.get("encoder", {}))), None
    if stats_dict is not None:
        from .data import NormStats

        stats = NormStats.from_dict(stats_dict)
        train = [apply_normalization(t, stats) for t in dataset.split("train")]
        val = [apply_normalization(t, stats) for t in dataset.split("val")]
    else:
        train, val, stats = _normalized_splits(dataset)
    config = TrainConfig.from_dict(
        {"seed": args.seed, "tau": args.tau, "scheme": args.scheme, **overrides}
    )
    torch.manual_seed(config.seed)
    log: list = []
    model, metric = finetune(encoder, train, val, config, log=log)
    out = resolve_path(args.out)
    if out is None:
        raise SystemExit("train requires --out CKPT")
    save_model(
        model,
        out,
        extra={
            "train_config": asdict(config),
            "norm_stats": stats.to_dict(),
            "val_metric": metric,
        },
    )
    print(f"wrote model checkpoint to {out}; best validation metric {metric:.6f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    overrides = load_config_file(args.config)
    if args.setting:
        overrides["setting"] = args.setting
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.deterministic:
        overrides["deterministic"] = True
    config = ExperimentConfig.from_dict(overrides)
    report = run_experiment(config)
    out = resolve_path(args.out) or Path(f"results/{config.config_hash()[:12]}")
    emit_report(report, out, plots=not args.no_plots)
    print(f"report written under {out}")
    print((out / "summary.txt").read_text())
    return 0


def cmd_theory_check(args: argparse.Namespace) -> int:
    records = run_suite(args.suite, seed=args.seed, n_instances=args.instances)
    failures = [r for r in records if not r["ok"]]
    report_path = resolve_path(args.report)
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with Path(report_path).open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        print(f"wrote {len(records)} instance records to {report_path}")
    print(f"suite={args.suite} instances={len(records)} failures={len(failures)}")
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    report = load_report(resolve_path(args.metrics))
    out = resolve_path(args.out) or Path(resolve_path(args.metrics)).parent
    emit_report(report, out, plots=not args.no_plots)
    print((Path(out) / "summary.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="costar",
        description="Counterfactual treatment-outcome estimation over time.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a simulated domain dataset")
    p.add_argument("--gamma", type=float, required=True, help="confounding strength")
    p.add_argument("--horizon", type=int, default=60)
    p.add_argument("--splits", default="1000,200,200", help="train,val,test sizes")
    p.add_argument("--domain", default="source")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive encoder pretraining")
    p.add_argument("--data", required=True, help="dataset file from `simulate`")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="train the outcome model")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", help="pretrained encoder checkpoint (omit for random init)")
    p.add_argument("--scheme", default="uniform", choices=("uniform", "inv", "sq_inv"))
    p.add_argument("--tau", type=int, default=6)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="run a full experiment protocol")
    p.add_argument("--setting", choices=("zero_shot", "data_efficient", "supervised"))
    p.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1,2")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("theory-check", parents=[common], help="run a verification suite")
    p.add_argument("--suite", required=True, choices=SUITE_NAMES)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--report", help="write per-instance JSONL records here")
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("report", parents=[common], help="re-render a stored metrics report")
    p.add_argument("--metrics", required=True, help="report.json file or results directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
