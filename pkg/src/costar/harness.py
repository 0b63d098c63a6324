"""Experiment protocols, metrics, and reports.

Runs the three evaluation settings on simulator data: ``zero_shot`` (train on
the confounded source domain, evaluate counterfactual estimates on the
unconfounded target domain), ``data_efficient`` (additionally fine-tune on a
small target budget, selected by target validation factual error), and
``supervised`` (train and test within the source domain).

Counterfactual evaluation protocol: for every test trajectory and every
anchor, one uniformly random treatment plan is drawn; the ground truth is the
simulator rolled forward under that plan reusing the trajectory's own noise
draws, so the plan is the only thing that changes. The model's single-pass
estimates and a last-value baseline are scored against that ground truth.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data import D_A, D_Y, DomainDataset, History, split_dynamic
from .estimator import TreatmentOutcomeRegressor
from .pkpd import DomainSpec, Trajectory, counterfactual_rollout, generate_domain_dataset

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "rmse",
    "baseline_last_value",
    "evaluate_counterfactual",
    "run_experiment",
    "emit_report",
    "load_report",
]

SETTINGS = ("zero_shot", "data_efficient", "supervised")

# stage tags for deriving independent seed streams from one run seed
_STAGE_SOURCE = 1
_STAGE_TARGET = 2
_STAGE_PLANS = 3


def desk_source_spec(gamma: float = 10.0, horizon: int = 60) -> DomainSpec:
    """Workstation-scale source domain (paper-scale sizes are overridable)."""
    return DomainSpec(gamma=gamma, horizon=horizon, n_train=1000, n_val=200, n_test=200, seed=0)


def desk_target_spec(gamma: float = 0.0, horizon: int = 60) -> DomainSpec:
    return DomainSpec(gamma=gamma, horizon=horizon, n_train=100, n_val=200, n_test=500, seed=0)


@dataclass
class ExperimentConfig:
    setting: str = "zero_shot"
    source: DomainSpec = field(default_factory=desk_source_spec)
    target: DomainSpec = field(default_factory=desk_target_spec)
    tau: int = 6
    weight_scheme: str = "uniform"
    seeds: tuple[int, ...] = (0, 1, 2)
    pretrain: bool = True
    finetune_budget: int = 100
    deterministic: bool = True
    estimator_overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = asdict(self.source)
        d["target"] = asdict(self.target)
        d["seeds"] = list(self.seeds)  # canonical JSON-safe form
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "source" in d and isinstance(d["source"], dict):
            d["source"] = DomainSpec(**d["source"])
        if "target" in d and isinstance(d["target"], dict):
            d["target"] = DomainSpec(**d["target"])
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _derive_seed(run_seed: int, stage: int) -> int:
    return int(np.random.SeedSequence(entropy=(run_seed, stage)).generate_state(1)[0])


def rmse(estimates: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Per-horizon root mean squared error over anchors and outcome dims.

    Inputs are ``(n, tau, d_y)`` in the raw (denormalized) outcome scale.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape:
        raise ValueError(f"shape mismatch {estimates.shape} vs {truths.shape}")
    if estimates.ndim != 3 or estimates.shape[0] == 0:
        raise ValueError("need a nonempty (n, tau, d_y) array")
    return np.sqrt(((estimates - truths) ** 2).mean(axis=(0, 2)))


def baseline_last_value(history: History, tau: int) -> np.ndarray:
    """Repeat the last observed outcome for every horizon: (tau, d_y)."""
    if history.length < 1:
        raise ValueError("history must contain at least one step")
    _, _, outcomes = split_dynamic(history.dynamic)
    return np.tile(outcomes[-1], (tau, 1))


def evaluate_counterfactual(
    estimator: TreatmentOutcomeRegressor,
    trajectories: Sequence[Trajectory],
    tau: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Score the estimator and the last-value baseline on random plans.

    For every trajectory and anchor ``t`` in ``1 .. T - tau`` a plan is drawn
    uniformly over binary treatments; the ground truth is the volume equation
    rolled forward under that plan with the trajectory's own noise draws.
    Returns per-horizon RMSE arrays keyed by method name.
    """
    if not trajectories:
        raise ValueError("no trajectories to evaluate")
    t_len = trajectories[0].length
    n_anchors = t_len - tau
    if n_anchors < 1:
        raise ValueError(f"length-{t_len} trajectories admit no tau={tau} anchors")
    n = len(trajectories)
    plans = rng.integers(0, 2, size=(n, n_anchors, tau, D_A)).astype(np.float64)

    truths = np.zeros((n, n_anchors, tau, D_Y))
    baseline = np.zeros_like(truths)
    for i, traj in enumerate(trajectories):
        for anchor in range(1, n_anchors + 1):
            prefix = traj.truncated(anchor)
            shared_noise = traj.noise[anchor : anchor + tau]
            truths[i, anchor - 1] = counterfactual_rollout(
                prefix, plans[i, anchor - 1], traj.params, n_samples=1, noise=shared_noise
            )[0]
            baseline[i, anchor - 1] = traj.outcomes[anchor - 1]  # last observed volume

    estimates = estimator.predict_counterfactual(trajectories, plans)
    flat = lambda a: a.reshape(n * n_anchors, tau, D_Y)
    return {
        "model": rmse(flat(estimates), flat(truths)),
        "last_value": rmse(flat(baseline), flat(truths)),
    }


@dataclass
class MetricsReport:
    """Per-seed, per-horizon RMSE for every method, plus provenance."""

    setting: str
    config: dict
    config_hash: str
    horizons: list[int]
    methods: dict  # method -> {str(seed): [rmse per horizon]}
    wall_clock_seconds: float
    provenance: str
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Mean and std across seeds per horizon; std is None for one seed."""
        out = {}
        for method, per_seed in self.methods.items():
            values = np.array([per_seed[s] for s in sorted(per_seed)])  # (seeds, tau)
            avg = values.mean(axis=1)
            out[method] = {
                "mean": values.mean(axis=0).tolist(),
                "std": values.std(axis=0, ddof=1).tolist() if values.shape[0] >= 2 else None,
                "avg_mean": float(avg.mean()),
                "avg_std": float(avg.std(ddof=1)) if values.shape[0] >= 2 else None,
            }
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()

    def values_equal(self, other: "MetricsReport") -> bool:
        """Equality of everything reproducible (wall clock excluded)."""
        keep = lambda d: {k: v for k, v in d.items() if k != "wall_clock_seconds"}
        return keep(self.to_dict()) == keep(other.to_dict())


def _provenance(config_hash: str) -> str:
    raw = f"costar/{__version__}/torch-{torch.__version__}/{config_hash}"
    return hashlib.sha1(raw.encode()).hexdigest()


def _assert_test_isolation(dataset: DomainDataset, phase: str) -> None:
    count = dataset.access_counts.get("test", 0)
    if count != 0:
        raise RuntimeError(
            f"evaluation isolation violated: {dataset.domain} test split was read "
            f"{count} time(s) before {phase}"
        )


def run_single_seed(config: ExperimentConfig, run_seed: int) -> dict:
    """One complete train/evaluate run; returns per-method RMSE and diagnostics."""
    source = generate_domain_dataset(
        replace(config.source, seed=_derive_seed(run_seed, _STAGE_SOURCE)), domain="source"
    )
    target_spec = replace(
        config.target,
        seed=_derive_seed(run_seed, _STAGE_TARGET),
        n_train=config.finetune_budget,
    )
    target = generate_domain_dataset(target_spec, domain="target")

    estimator = TreatmentOutcomeRegressor(
        tau=config.tau,
        weight_scheme=config.weight_scheme,
        pretrain=config.pretrain,
        seed=run_seed,
        **config.estimator_overrides,
    )
    estimator.fit(source)
    if config.setting == "data_efficient":
        estimator.adapt(target)

    if config.setting in ("zero_shot", "data_efficient"):
        _assert_test_isolation(target, "evaluation")
        eval_split = target.split("test")
    else:
        eval_split = source.split("test")

    plan_rng = np.random.default_rng(_derive_seed(run_seed, _STAGE_PLANS))
    metrics = evaluate_counterfactual(estimator, eval_split, config.tau, plan_rng)

    diagnostics = {"val_metric": estimator.val_metric_}
    steps = [r for r in estimator.pretrain_log_ if "loss_total" in r]
    if steps:
        first = float(np.mean([r["loss_total"] for r in steps if r["epoch"] == 0]))
        final_epoch = max(r["epoch"] for r in steps)
        last = float(np.mean([r["loss_total"] for r in steps if r["epoch"] == final_epoch]))
        diagnostics["pretrain_first_epoch_loss"] = first
        diagnostics["pretrain_final_epoch_loss"] = last
        diagnostics["pretrain_loss_drop"] = (first - last) / first
    return {"metrics": {k: v.tolist() for k, v in metrics.items()}, "diagnostics": diagnostics}


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Run every seed of the configured protocol and assemble the report."""
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    start = time.perf_counter()
    methods: dict[str, dict[str, list[float]]] = {}
    diagnostics: dict[str, dict] = {}
    for run_seed in config.seeds:
        result = run_single_seed(config, run_seed)
        for method, values in result["metrics"].items():
            methods.setdefault(method, {})[str(run_seed)] = values
        diagnostics[str(run_seed)] = result["diagnostics"]
    config_hash = config.config_hash()
    return MetricsReport(
        setting=config.setting,
        config=config.to_dict(),
        config_hash=config_hash,
        horizons=list(range(1, config.tau + 1)),
        methods=methods,
        wall_clock_seconds=time.perf_counter() - start,
        provenance=_provenance(config_hash),
        diagnostics=diagnostics,
    )


def _summary_table(report: MetricsReport) -> str:
    summary = report.summary()
    horizons = report.horizons
    header = ["method"] + [f"tau={h}" for h in horizons] + ["Avg"]
    rows = [header]
    for method in sorted(summary):
        entry = summary[method]
        cells = [method]
        for j in range(len(horizons)):
            mean = entry["mean"][j]
            if entry["std"] is not None:
                cells.append(f"{mean:.4f}+-{entry['std'][j]:.4f}")
            else:
                cells.append(f"{mean:.4f}+-n/a")
        if entry["avg_std"] is not None:
            cells.append(f"{entry['avg_mean']:.4f}+-{entry['avg_std']:.4f}")
        else:
            cells.append(f"{entry['avg_mean']:.4f}+-n/a")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    title = f"setting={report.setting}  config={report.config_hash[:12]}  wall_clock={report.wall_clock_seconds:.1f}s"
    return "\n".join([title, *lines]) + "\n"


def emit_report(report: MetricsReport, out_dir: str | Path, plots: bool = True) -> dict[str, Path]:
    """Write machine-readable, cell-level, and human-readable report files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    paths["report"] = report_path

    cells_path = out_dir / "metrics.jsonl"
    summary = report.summary()
    with cells_path.open("w") as fh:
        for method, per_seed in sorted(report.methods.items()):
            for seed in sorted(per_seed):
                for j, h in enumerate(report.horizons):
                    fh.write(
                        json.dumps(
                            {"kind": "cell", "method": method, "seed": int(seed), "horizon": h,
                             "rmse": per_seed[seed][j]}
                        )
                        + "\n"
                    )
        for method, entry in sorted(summary.items()):
            for j, h in enumerate(report.horizons):
                fh.write(
                    json.dumps(
                        {"kind": "summary", "method": method, "horizon": h,
                         "mean": entry["mean"][j],
                         "std": None if entry["std"] is None else entry["std"][j]}
                    )
                    + "\n"
                )
    paths["cells"] = cells_path

    summary_path = out_dir / "summary.txt"
    summary_path.write_text(_summary_table(report))
    paths["summary"] = summary_path

    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for method, entry in sorted(summary.items()):
            ax.plot(report.horizons, entry["mean"], marker="o", label=method)
            if entry["std"] is not None:
                mean = np.array(entry["mean"])
                std = np.array(entry["std"])
                ax.fill_between(report.horizons, mean - std, mean + std, alpha=0.2)
        ax.set_xlabel("horizon")
        ax.set_ylabel("counterfactual RMSE")
        ax.set_title(f"{report.setting} ({len(report.config['seeds'])} seeds)")
        ax.legend()
        fig.tight_layout()
        plot_path = out_dir / "rmse_vs_horizon.png"
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        paths["plot"] = plot_path
    return paths


def load_report(path: str | Path) -> MetricsReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return MetricsReport.from_dict(json.loads(path.read_text()))
