"""Dataset containers, normalization, history building, batching, and disk I/O.

The canonical per-step layout of the dynamic tensor fed to the encoder is
``[covariates | lagged treatments | outcomes]``: row ``i`` carries the
treatment taken at step ``i - 1`` (zeros at row 0), so a history of length
``t`` never contains the treatment decided at its final step. That decision is
the first element of the future plan.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .pkpd import DomainSpec, PKPDParams, Trajectory

__all__ = [
    "DomainDataset",
    "History",
    "NormStats",
    "Batch",
    "HistoryItem",
    "build_histories",
    "history_from_trajectory",
    "split_dynamic",
    "fit_normalization",
    "apply_normalization",
    "invert_normalization",
    "normalize_dataset",
    "make_batches",
    "trajectory_tensors",
    "save_dataset",
    "load_dataset",
]

D_X = 1  # residual drug concentration
D_A = 2  # (chemo, radio)
D_Y = 1  # tumor volume
D_V = 1  # patient-type indicator
D_S = D_X + D_A + D_Y


@dataclass
class NormStats:
    """Per-feature z-scoring statistics, fit on the source train split only.

    Treatments are excluded; zero-variance features get their std floored at
    ``std_floor`` so constant features normalize to exact zeros.
    """

    covariate_mean: np.ndarray
    covariate_std: np.ndarray
    outcome_mean: np.ndarray
    outcome_std: np.ndarray
    std_floor: float = 1e-6

    def to_dict(self) -> dict:
        return {
            "covariate_mean": self.covariate_mean.tolist(),
            "covariate_std": self.covariate_std.tolist(),
            "outcome_mean": self.outcome_mean.tolist(),
            "outcome_std": self.outcome_std.tolist(),
            "std_floor": self.std_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            covariate_mean=np.asarray(d["covariate_mean"], dtype=np.float64),
            covariate_std=np.asarray(d["covariate_std"], dtype=np.float64),
            outcome_mean=np.asarray(d["outcome_mean"], dtype=np.float64),
            outcome_std=np.asarray(d["outcome_std"], dtype=np.float64),
            std_floor=float(d.get("std_floor", 1e-6)),
        )

    def normalize_outcomes(self, y: np.ndarray) -> np.ndarray:
        return (y - self.outcome_mean) / self.outcome_std

    def denormalize_outcomes(self, y: np.ndarray) -> np.ndarray:
        return y * self.outcome_std + self.outcome_mean


@dataclass
class DomainDataset:
    """A set of trajectories with a domain tag, splits, and access accounting.

    Every read of a split goes through :meth:`split`, which counts accesses.
    The experiment harness uses those counters to assert that held-out target
    data is never touched before the evaluation phase.
    """

    domain: str
    spec: DomainSpec
    trajectories: list[Trajectory]
    norm_stats: NormStats | None = None
    normalized: bool = False
    access_counts: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Trajectory]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        self.access_counts[name] = self.access_counts.get(name, 0) + 1
        return [t for t in self.trajectories if t.split == name]

    def split_sizes(self) -> dict:
        sizes = {"train": 0, "val": 0, "test": 0}
        for t in self.trajectories:
            sizes[t.split] += 1
        return sizes


@dataclass
class History:
    """Observed history of length ``t`` in the canonical column layout."""

    dynamic: np.ndarray  # (t, D_S) columns [covariates | lagged treatments | outcomes]
    statics: np.ndarray  # (D_V,)

    def __post_init__(self) -> None:
        self.dynamic = np.asarray(self.dynamic, dtype=np.float64)
        self.statics = np.asarray(self.statics, dtype=np.float64)
        if self.dynamic.ndim != 2 or self.dynamic.shape[0] < 1:
            raise ValueError(f"dynamic must be (t >= 1, d_s), got {self.dynamic.shape}")

    @property
    def length(self) -> int:
        return self.dynamic.shape[0]


@dataclass
class HistoryItem:
    """One training/evaluation item: a history plus its tau-step future."""

    history: History
    future_treatments: np.ndarray  # (tau, D_A)
    future_outcomes: np.ndarray  # (tau, D_Y)
    subject_id: str = ""
    anchor: int = 0  # history length t


@dataclass
class Batch:
    """Padded batch of history items. Masked positions carry zeros."""

    dynamic: np.ndarray  # (B, T_max, D_S)
    statics: np.ndarray  # (B, D_V)
    mask: np.ndarray  # (B, T_max) bool, True on active steps
    future_treatments: np.ndarray  # (B, tau, D_A)
    future_outcomes: np.ndarray  # (B, tau, D_Y)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def lagged_treatments(treatments: np.ndarray) -> np.ndarray:
    """Shift treatments down one step; step 0 gets the zero vector."""
    lagged = np.zeros_like(treatments)
    lagged[1:] = treatments[:-1]
    return lagged


def history_from_trajectory(traj: Trajectory, t: int | None = None) -> History:
    """History of the first ``t`` steps (default: the whole trajectory)."""
    t = traj.length if t is None else t
    if not 1 <= t <= traj.length:
        raise ValueError(f"anchor {t} out of range for length-{traj.length} trajectory")
    dynamic = np.concatenate(
        [traj.covariates[:t], lagged_treatments(traj.treatments)[:t], traj.outcomes[:t]], axis=1
    )
    return History(dynamic=dynamic, statics=traj.statics.copy())


def split_dynamic(dynamic: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Undo the column concatenation: (covariates, lagged treatments, outcomes)."""
    return (
        dynamic[..., :D_X],
        dynamic[..., D_X : D_X + D_A],
        dynamic[..., D_X + D_A :],
    )


def build_histories(trajectories: Sequence[Trajectory], tau: int) -> list[HistoryItem]:
    """Emit every valid (history, future) pair with anchor stride 1.

    Anchors run over ``t = 1 .. T - tau``; the future plan for anchor ``t`` is
    ``treatments[t-1 : t-1+tau]`` and the targets are ``outcomes[t : t+tau]``.
    Trajectories shorter than ``tau + 1`` contribute nothing (with a warning).
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    items: list[HistoryItem] = []
    skipped = 0
    for traj in trajectories:
        if traj.length < tau + 1:
            skipped += 1
            continue
        for t in range(1, traj.length - tau + 1):
            items.append(
                HistoryItem(
                    history=history_from_trajectory(traj, t),
                    future_treatments=traj.treatments[t - 1 : t - 1 + tau].copy(),
                    future_outcomes=traj.outcomes[t : t + tau].copy(),
                    subject_id=traj.subject_id,
                    anchor=t,
                )
            )
    if skipped:
        warnings.warn(f"skipped {skipped} trajectories shorter than tau + 1 = {tau + 1}")
    return items


def fit_normalization(trajectories: Sequence[Trajectory], std_floor: float = 1e-6) -> NormStats:
    """Fit z-scoring statistics for covariates and outcomes.

    Must be called on the source train split only; the statistics are then
    applied unchanged to every other split and domain.
    """
    if not trajectories:
        raise ValueError("cannot fit normalization on an empty split")
    cov = np.concatenate([t.covariates for t in trajectories], axis=0)
    out = np.concatenate([t.outcomes for t in trajectories], axis=0)
    return NormStats(
        covariate_mean=cov.mean(axis=0),
        covariate_std=np.maximum(cov.std(axis=0), std_floor),
        outcome_mean=out.mean(axis=0),
        outcome_std=np.maximum(out.std(axis=0), std_floor),
        std_floor=std_floor,
    )


def apply_normalization(traj: Trajectory, stats: NormStats) -> Trajectory:
    """Z-score covariates and outcomes; treatments and statics untouched."""
    return replace(
        traj,
        covariates=(traj.covariates - stats.covariate_mean) / stats.covariate_std,
        outcomes=(traj.outcomes - stats.outcome_mean) / stats.outcome_std,
    )


def invert_normalization(traj: Trajectory, stats: NormStats) -> Trajectory:
    return replace(
        traj,
        covariates=traj.covariates * stats.covariate_std + stats.covariate_mean,
        outcomes=traj.outcomes * stats.outcome_std + stats.outcome_mean,
    )


def normalize_dataset(dataset: DomainDataset, stats: NormStats) -> DomainDataset:
    """Normalized copy of a dataset; reads every split through the counters."""
    if dataset.normalized:
        raise ValueError("dataset is already normalized")
    trajectories = [
        apply_normalization(t, stats)
        for name in ("train", "val", "test")
        for t in dataset.split(name)
    ]
    return DomainDataset(
        domain=dataset.domain,
        spec=dataset.spec,
        trajectories=trajectories,
        norm_stats=stats,
        normalized=True,
    )


def make_batches(
    items: Sequence[HistoryItem], batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """Shuffled padded batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        t_max = max(item.history.length for item in chunk)
        b = len(chunk)
        tau = chunk[0].future_treatments.shape[0]
        dynamic = np.zeros((b, t_max, D_S))
        statics = np.zeros((b, D_V))
        mask = np.zeros((b, t_max), dtype=bool)
        plans = np.zeros((b, tau, D_A))
        targets = np.zeros((b, tau, D_Y))
        for j, item in enumerate(chunk):
            t = item.history.length
            dynamic[j, :t] = item.history.dynamic
            statics[j] = item.history.statics
            mask[j, :t] = True
            plans[j] = item.future_treatments
            targets[j] = item.future_outcomes
        yield Batch(dynamic, statics, mask, plans, targets)


def trajectory_tensors(trajectories: Sequence[Trajectory]) -> dict:
    """Full-sequence arrays for one-pass training over all anchors.

    Returns ``dynamic (N, T, D_S)`` in the canonical layout, raw ``treatments
    (N, T, D_A)`` for sliding-window plans, ``outcomes (N, T, D_Y)``,
    ``statics (N, D_V)`` and ``lengths (N,)``. Sequences are padded with zeros
    to the longest length.
    """
    n = len(trajectories)
    t_max = max(t.length for t in trajectories)
    dynamic = np.zeros((n, t_max, D_S))
    treatments = np.zeros((n, t_max, D_A))
    outcomes = np.zeros((n, t_max, D_Y))
    statics = np.zeros((n, D_V))
    lengths = np.zeros(n, dtype=np.int64)
    for i, traj in enumerate(trajectories):
        t = traj.length
        dynamic[i, :t] = history_from_trajectory(traj).dynamic
        treatments[i, :t] = traj.treatments
        outcomes[i, :t] = traj.outcomes
        statics[i] = traj.statics
        lengths[i] = t
    return {
        "dynamic": dynamic,
        "treatments": treatments,
        "outcomes": outcomes,
        "statics": statics,
        "lengths": lengths,
    }


def _params_to_dict(params: PKPDParams) -> dict:
    return {
        "carrying_capacity": params.carrying_capacity,
        "growth_rate": params.growth_rate,
        "chemo_sensitivity": params.chemo_sensitivity,
        "radio_linear": params.radio_linear,
        "radio_quadratic": params.radio_quadratic,
        "noise_std": params.noise_std,
        "chemo_dose": params.chemo_dose,
        "radio_dose": params.radio_dose,
        "chemo_half_life_steps": params.chemo_half_life_steps,
    }


def save_dataset(dataset: DomainDataset, path: str | Path) -> Path:
    """Write one JSON record per trajectory plus a ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for traj in dataset.trajectories:
            record = {
                "id": traj.subject_id,
                "domain": traj.domain,
                "split": traj.split,
                "statics": traj.statics.tolist(),
                "covariates": traj.covariates.tolist(),
                "treatments": traj.treatments.tolist(),
                "outcomes": traj.outcomes.tolist(),
                "noise": traj.noise.tolist(),
                "params": _params_to_dict(traj.params),
            }
            fh.write(json.dumps(record) + "\n")
    meta = {
        "format_version": 1,
        "domain": dataset.domain,
        "normalized": dataset.normalized,
        "spec": {
            "gamma": dataset.spec.gamma,
            "horizon": dataset.spec.horizon,
            "n_train": dataset.spec.n_train,
            "n_val": dataset.spec.n_val,
            "n_test": dataset.spec.n_test,
            "seed": dataset.spec.seed,
        },
        "norm_stats": dataset.norm_stats.to_dict() if dataset.norm_stats else None,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')}")
    spec = DomainSpec(**meta["spec"])
    trajectories = []
    with path.open() as fh:
        for line in fh:
            rec = json.loads(line)
            trajectories.append(
                Trajectory(
                    covariates=np.asarray(rec["covariates"]),
                    treatments=np.asarray(rec["treatments"]),
                    outcomes=np.asarray(rec["outcomes"]),
                    statics=np.asarray(rec["statics"]),
                    noise=np.asarray(rec["noise"]),
                    params=PKPDParams(**rec["params"]),
                    subject_id=rec["id"],
                    domain=rec["domain"],
                    split=rec["split"],
                )
            )
    stats = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
    return DomainDataset(
        domain=meta["domain"],
        spec=spec,
        trajectories=trajectories,
        norm_stats=stats,
        normalized=bool(meta.get("normalized", False)),
    )
