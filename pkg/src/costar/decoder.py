"""Non-autoregressive multi-horizon outcome predictor.

Given one history representation and a future treatment plan, all horizons are
emitted in a single pass. For horizon ``i`` the decoder sees the immediately
preceding treatment (plan step ``i``) through a 1x1 convolution and the
remaining earlier plan (steps ``< i``) through a causally masked 1-D
convolution, so estimates at short horizons are exactly invariant to later
plan steps and nothing ever feeds back an emitted estimate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import trajectory_tensors
from .encoder import EncoderConfig, HistoryEncoder

__all__ = [
    "LossWeights",
    "make_weights",
    "factual_loss",
    "OutcomeDecoder",
    "OutcomeModel",
    "TrainConfig",
    "finetune",
    "train_outcome_model",
    "rollout_estimate",
    "TrainingDiverged",
    "save_model",
    "load_model",
]

MODEL_FORMAT_VERSION = 1

WEIGHT_SCHEMES = ("uniform", "inv", "sq_inv")


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass(frozen=True)
class LossWeights:
    """Per-horizon weights stored as exact rationals summing to one."""

    scheme: str
    fractions: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if sum(self.fractions) != 1:
            raise ValueError("weights must sum to exactly 1")
        if any(w <= 0 for w in self.fractions):
            raise ValueError("weights must be positive")

    @property
    def tau(self) -> int:
        return len(self.fractions)

    def as_array(self) -> np.ndarray:
        return np.array([float(w) for w in self.fractions])


def make_weights(scheme: str, tau: int) -> LossWeights:
    """Normalized horizon weights: uniform, 1/i, or 1/i^2."""
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if scheme == "uniform":
        raw = [Fraction(1)] * tau
    elif scheme == "inv":
        raw = [Fraction(1, i) for i in range(1, tau + 1)]
    elif scheme == "sq_inv":
        raw = [Fraction(1, i * i) for i in range(1, tau + 1)]
    else:
        raise ValueError(f"unknown weight scheme {scheme!r}; expected one of {WEIGHT_SCHEMES}")
    total = sum(raw)
    return LossWeights(scheme=scheme, fractions=tuple(w / total for w in raw))


def factual_loss(estimates: torch.Tensor, targets: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted sum over horizons of squared L2 errors.

    ``estimates``/``targets`` are ``(tau, d_y)`` or ``(B, tau, d_y)``; batched
    inputs are averaged over the batch.
    """
    if estimates.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(estimates.shape)} vs {tuple(targets.shape)}")
    w = torch.as_tensor(weights.as_array(), dtype=estimates.dtype, device=estimates.device)
    sq = ((estimates - targets) ** 2).sum(dim=-1)  # (..., tau)
    per_anchor = (sq * w).sum(dim=-1)
    return per_anchor.mean()


class OutcomeDecoder(nn.Module):
    """Decodes ``tau`` future outcomes from (history rep, treatment plan)."""

    def __init__(self, d_model: int, d_a: int, d_y: int, tau: int, hidden: int = 128):
        super().__init__()
        if tau < 1:
            raise ValueError("tau must be >= 1")
        self.tau = tau
        self.d_y = d_y
        self.immediate = nn.Linear(d_a, d_model)  # 1x1 conv over plan positions
        self.plan_conv = nn.Conv1d(d_a, d_model, kernel_size=tau)
        self.mlp = nn.Sequential(
            nn.Linear(3 * d_model, hidden),
            nn.GELU(),
            nn.Linear(hidden, d_y),
        )

    def forward(self, history_rep: torch.Tensor, plan: torch.Tensor) -> torch.Tensor:
        """
        Args:
          history_rep: (B, d_model) pooled representation of the history.
          plan: (B, tau, d_a) future treatments.
        Returns:
          (B, tau, d_y) estimates for horizons 1..tau, all in one pass.
        """
        if plan.shape[1] != self.tau:
            raise ValueError(f"plan has {plan.shape[1]} steps, decoder expects {self.tau}")
        immediate = self.immediate(plan)  # (B, tau, d_model)
        padded = F.pad(plan.transpose(1, 2), (self.tau - 1, 0))
        summary = self.plan_conv(padded).transpose(1, 2)  # position j sees plan[:j+1]
        # horizon i may see plan steps < i only: shift right, zero at horizon 1
        summary = F.pad(summary[:, :-1], (0, 0, 1, 0))
        rep = history_rep.unsqueeze(1).expand(-1, self.tau, -1)
        return self.mlp(torch.cat([rep, summary, immediate], dim=-1))


class OutcomeModel(nn.Module):
    """Encoder plus decoder; the end-to-end estimator network."""

    def __init__(self, encoder: HistoryEncoder, tau: int, hidden: int = 128):
        super().__init__()
        cfg = encoder.config
        self.encoder = encoder
        self.decoder = OutcomeDecoder(cfg.d_model, cfg.d_a, cfg.d_y, tau, hidden)
        self.tau = tau

    def forward(
        self,
        dynamic: torch.Tensor,
        statics: torch.Tensor,
        plan: torch.Tensor,
        lengths: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Estimates from the final active step of each history: (B, tau, d_y)."""
        z_s, _ = self.encoder(dynamic, statics)
        z = self.encoder.aggregate(z_s).history
        if lengths is None:
            z = z[:, -1]
        else:
            z = z[torch.arange(z.shape[0], device=z.device), lengths - 1]
        return self.decoder(z, plan)

    def anchored_estimates(
        self, dynamic: torch.Tensor, statics: torch.Tensor, treatments: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Estimates for every anchor of full sequences in one pass.

        For sequences of length T this scores anchors ``t = 1 .. T - tau``
        using the per-step representations of a single encoder forward.
        Returns ``(estimates (B, T - tau, tau, d_y), anchor_reps)``.
        """
        b, t_max, _ = dynamic.shape
        tau = self.tau
        if t_max <= tau:
            raise ValueError(f"sequences of length {t_max} admit no tau={tau} anchors")
        z_s, _ = self.encoder(dynamic, statics)
        z = self.encoder.aggregate(z_s).history  # (B, T, d_model)
        n_anchors = t_max - tau
        anchor_reps = z[:, :n_anchors]
        # plan windows: anchor t uses treatments[t-1 : t-1+tau]
        plans = treatments.unfold(1, tau, 1)[:, :n_anchors]  # (B, n_anchors, d_a, tau)
        plans = plans.permute(0, 1, 3, 2).reshape(b * n_anchors, tau, -1)
        flat = self.decoder(anchor_reps.reshape(b * n_anchors, -1), plans)
        return flat.view(b, n_anchors, tau, -1), anchor_reps


def anchored_targets(outcomes: torch.Tensor, tau: int) -> torch.Tensor:
    """Target windows aligned with :meth:`OutcomeModel.anchored_estimates`."""
    n_anchors = outcomes.shape[1] - tau
    # anchor t targets outcomes[t : t+tau]
    windows = outcomes.unfold(1, tau, 1).permute(0, 1, 3, 2)  # (B, T-tau+1, tau, d_y)
    return windows[:, 1 : n_anchors + 1]


def anchor_validity_mask(lengths: torch.Tensor, t_max: int, tau: int) -> torch.Tensor:
    """(B, T - tau) mask of anchors whose full target window is observed."""
    anchors = torch.arange(1, t_max - tau + 1, device=lengths.device)
    return anchors[None, :] + tau <= lengths[:, None]


@dataclass
class TrainConfig:
    tau: int = 6
    scheme: str = "uniform"
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 60
    hidden: int = 128
    lr_decay: bool = True  # cosine decay of the learning rate to ~0 over the run
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _weighted_factual_loss(estimates, targets, valid, weights_arr):
    sq = ((estimates - targets) ** 2).sum(dim=-1)  # (B, A, tau)
    per_anchor = (sq * weights_arr).sum(dim=-1)
    masked = per_anchor * valid
    return masked.sum() / valid.sum().clamp(min=1)


def _epoch_metric(model, tensors, weights) -> float:
    """Per-horizon RMSE averaged with the training weights (model selection)."""
    model.eval()
    with torch.no_grad():
        est, _ = model.anchored_estimates(tensors["dynamic"], tensors["statics"], tensors["treatments"])
        targets = anchored_targets(tensors["outcomes"], model.tau)
        valid = anchor_validity_mask(tensors["lengths"], tensors["dynamic"].shape[1], model.tau)
        sq = ((est - targets) ** 2).sum(dim=-1)
        per_horizon = (sq * valid.unsqueeze(-1)).sum(dim=(0, 1)) / valid.sum().clamp(min=1)
        rmse = per_horizon.sqrt()
        w = torch.as_tensor(weights.as_array(), dtype=rmse.dtype)
        return float((rmse * w).sum())


def _to_tensors(trajectories: Sequence, dtype=torch.float32) -> dict:
    arrays = trajectory_tensors(trajectories)
    out = {k: torch.as_tensor(v, dtype=dtype) for k, v in arrays.items() if k != "lengths"}
    out["lengths"] = torch.as_tensor(arrays["lengths"], dtype=torch.long)
    return out


def finetune(
    encoder: HistoryEncoder,
    train_trajectories: Sequence,
    val_trajectories: Sequence,
    config: TrainConfig,
    log: list | None = None,
) -> tuple[OutcomeModel, float]:
    """Jointly train decoder and encoder on the weighted factual loss.

    Expects normalized trajectories. Optimizes every anchor of every sequence
    per epoch and keeps the parameters with the lowest validation metric
    (weighted per-horizon factual RMSE, same weights as training). Returns the
    best model and its validation metric.
    """
    model = OutcomeModel(encoder, config.tau, config.hidden)
    return train_outcome_model(model, train_trajectories, val_trajectories, config, log)


def train_outcome_model(
    model: OutcomeModel,
    train_trajectories: Sequence,
    val_trajectories: Sequence,
    config: TrainConfig,
    log: list | None = None,
) -> tuple[OutcomeModel, float]:
    """Training loop behind :func:`finetune`; also used to adapt a fitted model."""
    weights = make_weights(config.scheme, config.tau)
    weights_arr = torch.as_tensor(weights.as_array(), dtype=torch.float32)
    if model.tau != config.tau:
        raise ValueError(f"model horizon {model.tau} differs from config horizon {config.tau}")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(config.epochs, 1))
        if config.lr_decay
        else None
    )
    rng = np.random.default_rng(config.seed)

    train = _to_tensors(train_trajectories)
    val = _to_tensors(val_trajectories)
    n = train["dynamic"].shape[0]
    t_max = train["dynamic"].shape[1]
    targets_all = anchored_targets(train["outcomes"], config.tau)
    valid_all = anchor_validity_mask(train["lengths"], t_max, config.tau).to(torch.float32)

    # the incoming parameters are a selection candidate too, so continued
    # fine-tuning can never hand back something worse on validation
    best_metric = _epoch_metric(model, val, weights)
    best_state = copy.deepcopy(model.state_dict())
    if log is not None:
        log.append({"epoch": -1, "step": 0, "val_metric": best_metric})
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            est, _ = model.anchored_estimates(
                train["dynamic"][idx], train["statics"][idx], train["treatments"][idx]
            )
            loss = _weighted_factual_loss(est, targets_all[idx], valid_all[idx], weights_arr)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite factual loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        if scheduler is not None:
            scheduler.step()
        metric = _epoch_metric(model, val, weights)
        if log is not None:
            log.append({"epoch": epoch, "step": step, "val_metric": metric})
        if metric < best_metric:
            best_metric = metric
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, best_metric


def rollout_estimate(model: OutcomeModel, dynamic: torch.Tensor, statics: torch.Tensor, plan: torch.Tensor) -> torch.Tensor:
    """Single-pass estimate for one history: (tau, d_y).

    Never feeds an emitted estimate back into any input; runtime is one
    encoder pass plus one decoder pass regardless of the horizon.
    """
    model.eval()
    with torch.no_grad():
        out = model(dynamic.unsqueeze(0), statics.unsqueeze(0), plan.unsqueeze(0))
    return out.squeeze(0)


def save_model(model: OutcomeModel, path: str | Path, extra: dict | None = None) -> Path:
    from dataclasses import asdict

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "encoder_config": asdict(model.encoder.config),
        "tau": model.tau,
        "hidden": model.decoder.mlp[0].out_features,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_model(path: str | Path) -> tuple[OutcomeModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {payload.get('format_version')}")
    encoder = HistoryEncoder(EncoderConfig(**payload["encoder_config"]))
    model = OutcomeModel(encoder, payload["tau"], payload["hidden"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
