"""Momentum contrastive pretraining of the history encoder.

Two augmented views of each history are pushed together, and apart from the
rest of the batch, by a symmetric InfoNCE loss between prediction-head outputs
of the online encoder and stop-gradient targets from a momentum copy. The loss
is applied to the whole-history representation and, at one third weight in
total, to the covariate/treatment/outcome component representations.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import D_A, D_S, D_X
from .encoder import HistoryEncoder, save_checkpoint

__all__ = [
    "SSLConfig",
    "SSLState",
    "augment",
    "infonce",
    "ssl_losses",
    "momentum_update",
    "pretrain",
    "PretrainDiverged",
]

# dynamic-tensor columns subject to augmentation (treatment columns excluded)
AUGMENTED_COLUMNS = tuple(i for i in range(D_S) if not D_X <= i < D_X + D_A)


class PretrainDiverged(RuntimeError):
    """Raised when the self-supervised loss becomes non-finite."""


@dataclass
class SSLConfig:
    momentum: float = 0.99
    temperature: float = 1.0
    head_hidden: int | None = None  # defaults to d_model
    scale_std: float = 0.3
    shift_std: float = 0.5
    jitter_std: float = 0.3
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SSLConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class PredictionHead(nn.Module):
    """Two-layer MLP mapping representations to the contrastive space."""

    def __init__(self, d_model: int, hidden: int | None = None):
        super().__init__()
        hidden = d_model if hidden is None else hidden
        self.net = nn.Sequential(nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SSLState(nn.Module):
    """Online encoder, its momentum copy, and the shared prediction head.

    The momentum encoder starts as an exact copy of the online encoder and
    never receives gradients; it only moves through :func:`momentum_update`.
    """

    def __init__(self, encoder: HistoryEncoder, config: SSLConfig):
        super().__init__()
        self.config = config
        self.online = encoder
        self.momentum = copy.deepcopy(encoder)
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        self.head = PredictionHead(encoder.config.d_model, config.head_hidden)

    def trainable_parameters(self):
        return list(self.online.parameters()) + list(self.head.parameters())


def augment(
    dynamic: torch.Tensor,
    mask: torch.Tensor,
    rng: np.random.Generator,
    config: SSLConfig,
) -> torch.Tensor:
    """Random scale/shift/jitter view of normalized histories.

    Scale and shift are drawn per sample and per feature, jitter per element;
    only covariate and outcome columns are transformed, treatment columns are
    returned bit-identical and masked positions stay zero.
    """
    b, t, d_s = dynamic.shape
    if d_s != D_S:
        raise ValueError(f"expected {D_S} dynamic columns, got {d_s}")
    out = dynamic.clone()
    cols = torch.as_tensor(AUGMENTED_COLUMNS)
    k = len(AUGMENTED_COLUMNS)
    scale = torch.as_tensor(
        rng.normal(1.0, config.scale_std, size=(b, 1, k)), dtype=dynamic.dtype
    )
    shift = torch.as_tensor(
        rng.normal(0.0, config.shift_std, size=(b, 1, k)), dtype=dynamic.dtype
    )
    jitter = torch.as_tensor(
        rng.normal(0.0, config.jitter_std, size=(b, t, k)), dtype=dynamic.dtype
    )
    view = dynamic[..., cols] * scale + shift + jitter
    out[..., cols] = view * mask.unsqueeze(-1).to(dynamic.dtype)
    return out


def infonce(queries: torch.Tensor, keys: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """InfoNCE over cosine similarities with matched pairs on the diagonal."""
    if queries.shape != keys.shape or queries.ndim != 2:
        raise ValueError("queries and keys must both be (B, d)")
    q_norm = queries.norm(dim=1, keepdim=True)
    k_norm = keys.norm(dim=1, keepdim=True)
    if (q_norm == 0).any() or (k_norm == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm rows")
    sim = (queries / q_norm) @ (keys / k_norm).T / temperature
    labels = torch.arange(queries.shape[0], device=queries.device)
    return F.cross_entropy(sim, labels)


def _final_step_bundle(encoder: HistoryEncoder, dynamic, statics, lengths):
    z_s, _ = encoder(dynamic, statics)
    bundle = encoder.aggregate(z_s)
    idx = torch.arange(dynamic.shape[0], device=dynamic.device)
    last = lengths - 1
    return {
        "X": bundle.covariates[idx, last],
        "A": bundle.treatments[idx, last],
        "Y": bundle.outcomes[idx, last],
        "H": bundle.history[idx, last],
    }


def ssl_losses(
    state: SSLState,
    view_a: torch.Tensor,
    view_b: torch.Tensor,
    statics: torch.Tensor,
    lengths: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Symmetric component-wise contrastive losses at the final active step.

    Returns the whole-history loss ``H``, component losses ``X``/``A``/``Y``,
    and ``total = H + (X + A + Y) / 3``. Momentum targets are computed under
    ``no_grad`` so they contribute no gradient.
    """
    temp = state.config.temperature
    online_a = _final_step_bundle(state.online, view_a, statics, lengths)
    online_b = _final_step_bundle(state.online, view_b, statics, lengths)
    with torch.no_grad():
        target_a = _final_step_bundle(state.momentum, view_a, statics, lengths)
        target_b = _final_step_bundle(state.momentum, view_b, statics, lengths)

    losses: dict[str, torch.Tensor] = {}
    for comp in ("H", "X", "A", "Y"):
        losses[comp] = infonce(state.head(online_a[comp]), target_b[comp], temp) + infonce(
            state.head(online_b[comp]), target_a[comp], temp
        )
    # combine in double so the logged identity total = H + (X + A + Y) / 3
    # holds to machine precision; the casts are exact and gradient-transparent
    losses["total"] = losses["H"].double() + (
        losses["X"].double() + losses["A"].double() + losses["Y"].double()
    ) / 3.0
    return losses


@torch.no_grad()
def momentum_update(state: SSLState, momentum: float | None = None) -> None:
    """theta_mo <- m * theta_mo + (1 - m) * theta_online, elementwise."""
    m = state.config.momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    for p_mo, p_on in zip(state.momentum.parameters(), state.online.parameters()):
        p_mo.mul_(m).add_(p_on, alpha=1.0 - m)


def _validation_loss(state: SSLState, tensors: dict, config: SSLConfig) -> float:
    """Deterministic validation loss: fixed augmentation seed each call."""
    state.eval()
    rng = np.random.default_rng(config.seed + 0x5EED)
    total = 0.0
    count = 0
    n = tensors["dynamic"].shape[0]
    with torch.no_grad():
        for start in range(0, n, config.batch_size):
            sl = slice(start, start + config.batch_size)
            dyn = tensors["dynamic"][sl]
            mask = tensors["mask"][sl]
            if dyn.shape[0] < 2:
                continue  # a single sample has no negatives
            va = augment(dyn, mask, rng, config)
            vb = augment(dyn, mask, rng, config)
            losses = ssl_losses(state, va, vb, tensors["statics"][sl], tensors["lengths"][sl])
            total += float(losses["total"]) * dyn.shape[0]
            count += dyn.shape[0]
    state.train()
    return total / max(count, 1)


def _ssl_tensors(trajectories: Sequence) -> dict:
    from .decoder import _to_tensors

    tensors = _to_tensors(trajectories)
    t_max = tensors["dynamic"].shape[1]
    steps = torch.arange(t_max)
    tensors["mask"] = steps[None, :] < tensors["lengths"][:, None]
    return tensors


def pretrain(
    encoder: HistoryEncoder,
    train_trajectories: Sequence,
    val_trajectories: Sequence,
    config: SSLConfig,
    log_path: str | Path | None = None,
) -> tuple[HistoryEncoder, list[dict]]:
    """Run the contrastive pretraining loop on normalized trajectories.

    Logs every step's loss components, tracks a fixed-seed validation loss per
    epoch, and returns the online encoder restored to its best-validation
    parameters together with the step log.
    """
    state = SSLState(encoder, config)
    optimizer = torch.optim.Adam(state.trainable_parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    train = _ssl_tensors(train_trajectories)
    val = _ssl_tensors(val_trajectories)
    n = train["dynamic"].shape[0]

    records: list[dict] = []
    best_val = math.inf
    best_state = copy.deepcopy(state.online.state_dict())
    step = 0
    state.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            if idx.shape[0] < 2:
                continue
            dyn = train["dynamic"][idx]
            mask = train["mask"][idx]
            view_a = augment(dyn, mask, rng, config)
            view_b = augment(dyn, mask, rng, config)
            losses = ssl_losses(state, view_a, view_b, train["statics"][idx], train["lengths"][idx])
            if not torch.isfinite(losses["total"]):
                raise PretrainDiverged(
                    f"non-finite SSL loss at epoch {epoch} step {step}: "
                    + ", ".join(f"{k}={v.detach().item():.4g}" for k, v in losses.items())
                )
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            momentum_update(state)
            records.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "loss_history": losses["H"].detach().item(),
                    "loss_covariates": losses["X"].detach().item(),
                    "loss_treatments": losses["A"].detach().item(),
                    "loss_outcomes": losses["Y"].detach().item(),
                    "loss_total": losses["total"].detach().item(),
                }
            )
            step += 1
        val_loss = _validation_loss(state, val, config)
        records.append({"step": step, "epoch": epoch, "val_loss_total": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(state.online.state_dict())

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")

    state.online.load_state_dict(best_state)
    return state.online, records


def pretrain_to_checkpoint(
    encoder: HistoryEncoder,
    train_trajectories: Sequence,
    val_trajectories: Sequence,
    config: SSLConfig,
    out_path: str | Path,
    log_path: str | Path | None = None,
) -> Path:
    """Pretrain and persist the best encoder with its SSL configuration."""
    trained, _ = pretrain(encoder, train_trajectories, val_trajectories, config, log_path)
    return save_checkpoint(trained, out_path, extra={"ssl_config": asdict(config)})
