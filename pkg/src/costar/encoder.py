"""Dual-attention history encoder.

Each scalar observation becomes one token. Alternating blocks attend along
time (causally, per feature, with relative-position terms) and along the
feature axis (fully, per time step, with static features joining as extra
tokens). Because no operation ever mixes a step with a later one, the
representation at step ``t`` is a function of steps ``<= t`` only, so a single
forward pass scores every prefix of a sequence at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "EncoderConfig",
    "RepresentationBundle",
    "HistoryEncoder",
    "feature_positional_encoding",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1

# group order of the tree positional encoding: covariates, treatments,
# outcomes, statics
GROUP_INDEX = {"X": 0, "A": 1, "Y": 2, "V": 3}


@dataclass(frozen=True)
class EncoderConfig:
    d_x: int = 1
    d_a: int = 2
    d_y: int = 1
    d_v: int = 1
    d_model: int = 24
    n_layers: int = 1
    n_heads: int = 2
    dropout: float = 0.1
    max_relative_position: int = 15

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def d_s(self) -> int:
        return self.d_x + self.d_a + self.d_y

    @property
    def max_features(self) -> int:
        return max(self.d_x, self.d_a, self.d_y, self.d_v)


@dataclass
class RepresentationBundle:
    """Per-step component representations (means over feature-token groups)."""

    covariates: torch.Tensor  # (..., T, d_model), mean over covariate tokens
    treatments: torch.Tensor
    outcomes: torch.Tensor
    history: torch.Tensor  # mean over all dynamic tokens


class SelfAttention(nn.Module):
    """Multi-head self-attention, optionally causal with relative key terms."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, max_relative_position: int | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.attn_dropout = nn.Dropout(dropout)
        self.max_relative_position = max_relative_position
        if max_relative_position is not None:
            self.relative_keys = nn.Parameter(
                torch.empty(2 * max_relative_position + 1, self.d_head).normal_(std=0.02)
            )

    def forward(self, x: torch.Tensor, causal: bool, return_weights: bool = False):
        b, t, _ = x.shape
        shape = (b, t, self.n_heads, self.d_head)
        q = self.q_proj(x).view(shape).transpose(1, 2)  # (b, h, t, dh)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)

        scores = q @ k.transpose(-2, -1)
        if self.max_relative_position is not None:
            pos = torch.arange(t, device=x.device)
            rel = (pos[None, :] - pos[:, None]).clamp(
                -self.max_relative_position, self.max_relative_position
            )
            rel_emb = self.relative_keys[rel + self.max_relative_position]  # (t, t, dh)
            scores = scores + torch.einsum("bhid,ijd->bhij", q, rel_emb)
        scores = scores / math.sqrt(self.d_head)
        if causal:
            future = torch.triu(torch.ones(t, t, device=x.device, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        attn = self.attn_dropout(weights)
        out = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.fc2(F.gelu(self.fc1(x))))


class TemporalBlock(nn.Module):
    """Causal attention along time, run independently for every feature.

    Static embeddings carry no time axis, so they skip the attention and pass
    through the (shared) point-wise feed-forward only.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout, cfg.max_relative_position)
        self.norm_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.dropout)

    def forward(self, z_s: torch.Tensor, z_v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, f, d = z_s.shape
        x = z_s.permute(0, 2, 1, 3).reshape(b * f, t, d)
        x = x + self.attn(self.norm_attn(x), causal=True)
        x = x + self.ff(self.norm_ff(x))
        z_s = x.view(b, f, t, d).permute(0, 2, 1, 3)
        z_v = z_v + self.ff(self.norm_ff(z_v))
        return z_s, z_v


class FeatureBlock(nn.Module):
    """Full attention across feature tokens within each time step.

    Dynamic tokens attend over the concatenation of dynamic and (broadcast)
    static tokens. Static embeddings are updated once, by attention among the
    static tokens only, so they remain time-invariant.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.dropout)
        self.d_s = cfg.d_s

    def forward(self, z_s: torch.Tensor, z_v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, f, d = z_s.shape
        tokens = torch.cat([z_s, z_v.unsqueeze(1).expand(b, t, -1, d)], dim=2)
        x = tokens.reshape(b * t, -1, d)
        out = self.attn(self.norm_attn(x), causal=False).view(b, t, -1, d)
        z_s = z_s + out[:, :, : self.d_s]
        z_s = z_s + self.ff(self.norm_ff(z_s))
        z_v = z_v + self.attn(self.norm_attn(z_v), causal=False)
        z_v = z_v + self.ff(self.norm_ff(z_v))
        return z_s, z_v


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.temporal = TemporalBlock(cfg)
        self.feature = FeatureBlock(cfg)

    def forward(self, z_s, z_v):
        z_s, z_v = self.temporal(z_s, z_v)
        return self.feature(z_s, z_v)


def feature_positional_encoding(tree_table: torch.Tensor, group: str, index: int) -> torch.Tensor:
    """Tree positional encoding of feature ``index`` within ``group``.

    ``tree_table`` has shape ``(d_model, 4 + max_features)``; the encoding is
    the table times the concatenated group one-hot and index one-hot, which
    reduces to the sum of two columns.
    """
    if group not in GROUP_INDEX:
        raise ValueError(f"unknown feature group {group!r}")
    n_index = tree_table.shape[1] - 4
    if not 0 <= index < n_index:
        raise IndexError(f"feature index {index} out of range for table with {n_index} slots")
    return tree_table[:, GROUP_INDEX[group]] + tree_table[:, 4 + index]


class HistoryEncoder(nn.Module):
    """Maps a history to per-step, per-feature-token representations."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(1, config.d_model)  # shared scalar embedding
        self.tree_table = nn.Parameter(
            torch.empty(config.d_model, 4 + config.max_features).normal_(std=0.02)
        )
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))

    def _positional_tables(self) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        dyn = [("X", i) for i in range(cfg.d_x)]
        dyn += [("A", i) for i in range(cfg.d_a)]
        dyn += [("Y", i) for i in range(cfg.d_y)]
        dyn_pos = torch.stack([feature_positional_encoding(self.tree_table, g, i) for g, i in dyn])
        sta_pos = torch.stack(
            [feature_positional_encoding(self.tree_table, "V", i) for i in range(cfg.d_v)]
        )
        return dyn_pos, sta_pos  # (d_s, d_model), (d_v, d_model)

    def embed(self, dynamic: torch.Tensor, statics: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Scalar projection plus broadcast feature positional encodings."""
        dyn_pos, sta_pos = self._positional_tables()
        e_s = self.input_proj(dynamic.unsqueeze(-1))  # (b, t, d_s, d_model)
        e_v = self.input_proj(statics.unsqueeze(-1))  # (b, d_v, d_model)
        return e_s + dyn_pos, e_v + sta_pos

    def forward(self, dynamic: torch.Tensor, statics: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
          dynamic: (B, T, d_s) in the canonical [covariates | lagged
            treatments | outcomes] column layout.
          statics: (B, d_v)
        Returns:
          (B, T, d_s, d_model) dynamic-token and (B, d_v, d_model)
          static-token representations from the final layer.
        """
        if dynamic.ndim != 3 or dynamic.shape[-1] != self.config.d_s:
            raise ValueError(f"dynamic must be (B, T, {self.config.d_s}), got {tuple(dynamic.shape)}")
        z_s, z_v = self.embed(dynamic, statics)
        for layer in self.layers:
            z_s, z_v = layer(z_s, z_v)
        return z_s, z_v

    def aggregate(self, z_s: torch.Tensor) -> RepresentationBundle:
        """Average-pool token representations into component vectors."""
        cfg = self.config
        return RepresentationBundle(
            covariates=z_s[..., : cfg.d_x, :].mean(dim=-2),
            treatments=z_s[..., cfg.d_x : cfg.d_x + cfg.d_a, :].mean(dim=-2),
            outcomes=z_s[..., cfg.d_x + cfg.d_a :, :].mean(dim=-2),
            history=z_s.mean(dim=-2),
        )

    def encode(self, dynamic: torch.Tensor, statics: torch.Tensor) -> tuple[torch.Tensor, RepresentationBundle]:
        """Single pass returning final-layer tokens and the pooled bundle.

        Accepts a single history ``(T, d_s)`` / ``(d_v,)`` or a batch; the
        returned tensors match the input's batchedness.
        """
        single = dynamic.ndim == 2
        if single:
            dynamic = dynamic.unsqueeze(0)
            statics = statics.unsqueeze(0)
        z_s, _ = self.forward(dynamic, statics)
        bundle = self.aggregate(z_s)
        if single:
            z_s = z_s.squeeze(0)
            bundle = RepresentationBundle(
                covariates=bundle.covariates.squeeze(0),
                treatments=bundle.treatments.squeeze(0),
                outcomes=bundle.outcomes.squeeze(0),
                history=bundle.history.squeeze(0),
            )
        return z_s, bundle


def save_checkpoint(encoder: HistoryEncoder, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(encoder.config),
        "state_dict": encoder.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[HistoryEncoder, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported encoder checkpoint format version {version}")
    encoder = HistoryEncoder(EncoderConfig(**payload["config"]))
    encoder.load_state_dict(payload["state_dict"])
    return encoder, payload.get("extra", {})
