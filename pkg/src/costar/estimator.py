"""Scikit-learn-style estimator wrapping pretraining, training, and inference.

``TreatmentOutcomeRegressor`` owns the whole pipeline behind a ``fit`` /
``predict`` / ``get_params`` surface: it fits normalization statistics on the
training split, optionally runs contrastive pretraining, fine-tunes the
encoder jointly with the decoder, and at inference maps raw-scale histories
plus binary treatment plans to raw-scale multi-horizon outcome estimates.
"""

from __future__ import annotations

import inspect
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    D_A,
    D_V,
    D_X,
    D_Y,
    DomainDataset,
    History,
    NormStats,
    apply_normalization,
    history_from_trajectory,
    split_dynamic,
)
from .decoder import (
    TrainConfig,
    finetune,
    load_model,
    save_model,
    train_outcome_model,
)
from .encoder import EncoderConfig, HistoryEncoder
from .pretrain import SSLConfig, pretrain
from .validation import check_binary

__all__ = ["TreatmentOutcomeRegressor", "NotFittedError"]


class NotFittedError(RuntimeError):
    pass


class TreatmentOutcomeRegressor:
    """Multi-horizon counterfactual outcome estimator.

    Parameters mirror the reference configuration for the tumor data: a
    24-wide single-layer dual-attention encoder with 2 heads and dropout 0.1,
    contrastive pretraining at batch size 64 with momentum 0.99 and
    temperature 1.0, and a decoder with 128 hidden units trained at batch
    size 32, all at learning rate 1e-3.
    """

    def __init__(
        self,
        tau: int = 6,
        weight_scheme: str = "uniform",
        d_model: int = 24,
        n_layers: int = 1,
        n_heads: int = 2,
        dropout: float = 0.1,
        max_relative_position: int = 15,
        decoder_hidden: int = 128,
        pretrain: bool = True,
        pretrain_epochs: int = 30,
        finetune_epochs: int = 60,
        ssl_batch_size: int = 64,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        momentum: float = 0.99,
        temperature: float = 1.0,
        scale_std: float = 0.3,
        shift_std: float = 0.5,
        jitter_std: float = 0.3,
        seed: int = 0,
    ):
        self.tau = tau
        self.weight_scheme = weight_scheme
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout = dropout
        self.max_relative_position = max_relative_position
        self.decoder_hidden = decoder_hidden
        self.pretrain = pretrain
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.ssl_batch_size = ssl_batch_size
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.temperature = temperature
        self.scale_std = scale_std
        self.shift_std = shift_std
        self.jitter_std = jitter_std
        self.seed = seed

    # -- sklearn parameter protocol -------------------------------------------------
    @classmethod
    def _param_names(cls) -> list[str]:
        signature = inspect.signature(cls.__init__)
        return [name for name in signature.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "TreatmentOutcomeRegressor":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    # -- configuration helpers ------------------------------------------------------
    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_x=D_X,
            d_a=D_A,
            d_y=D_Y,
            d_v=D_V,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            dropout=self.dropout,
            max_relative_position=self.max_relative_position,
        )

    def _ssl_config(self) -> SSLConfig:
        return SSLConfig(
            momentum=self.momentum,
            temperature=self.temperature,
            scale_std=self.scale_std,
            shift_std=self.shift_std,
            jitter_std=self.jitter_std,
            batch_size=self.ssl_batch_size,
            learning_rate=self.learning_rate,
            epochs=self.pretrain_epochs,
            seed=self.seed,
        )

    def _train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            tau=self.tau,
            scheme=self.weight_scheme,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.finetune_epochs if epochs is None else epochs,
            hidden=self.decoder_hidden,
            seed=self.seed,
        )

    # -- fitting ---------------------------------------------------------------------
    def fit(self, dataset: DomainDataset) -> "TreatmentOutcomeRegressor":
        """Fit on a raw (unnormalized) dataset's train/val splits."""
        from .data import fit_normalization

        if dataset.normalized:
            raise ValueError("fit expects a raw dataset; normalization is internal")
        torch.manual_seed(self.seed)
        train_raw = dataset.split("train")
        val_raw = dataset.split("val")
        if not train_raw or not val_raw:
            raise ValueError("fit requires nonempty train and val splits")
        self.stats_ = fit_normalization(train_raw)
        train = [apply_normalization(t, self.stats_) for t in train_raw]
        val = [apply_normalization(t, self.stats_) for t in val_raw]

        encoder = HistoryEncoder(self._encoder_config())
        self.pretrain_log_ = []
        if self.pretrain:
            encoder, self.pretrain_log_ = pretrain(encoder, train, val, self._ssl_config())
        self.finetune_log_ = []
        self.model_, self.val_metric_ = finetune(
            encoder, train, val, self._train_config(), log=self.finetune_log_
        )
        return self

    def adapt(self, dataset: DomainDataset, epochs: int | None = None) -> "TreatmentOutcomeRegressor":
        """Continue fine-tuning on another domain's train/val splits.

        Normalization statistics stay frozen at their source-fit values, and
        the kept parameters are the validation-best over the continued run
        including the incoming ones.
        """
        self._require_fitted()
        train = [apply_normalization(t, self.stats_) for t in dataset.split("train")]
        val = [apply_normalization(t, self.stats_) for t in dataset.split("val")]
        if not train or not val:
            raise ValueError("adapt requires nonempty train and val splits")
        torch.manual_seed(self.seed + 1)
        self.adapt_log_ = []
        self.model_, self.val_metric_ = train_outcome_model(
            self.model_, train, val, self._train_config(epochs), log=self.adapt_log_
        )
        return self

    def _require_fitted(self) -> None:
        if getattr(self, "model_", None) is None:
            raise NotFittedError("call fit before predict/adapt/save")

    # -- inference --------------------------------------------------------------------
    def _normalize_dynamic(self, dynamic: np.ndarray) -> np.ndarray:
        cov, lagged, out = split_dynamic(dynamic)
        cov = (cov - self.stats_.covariate_mean) / self.stats_.covariate_std
        out = (out - self.stats_.outcome_mean) / self.stats_.outcome_std
        return np.concatenate([cov, lagged, out], axis=-1)

    def predict(self, histories: Sequence[History], plans: np.ndarray) -> np.ndarray:
        """Estimate outcomes for raw-scale histories under binary plans.

        Args:
          histories: raw-scale ``History`` objects (any lengths).
          plans: ``(n, tau, d_a)`` binary future treatments.
        Returns:
          ``(n, tau, d_y)`` outcome estimates in the raw outcome scale.
        """
        self._require_fitted()
        plans = np.asarray(plans, dtype=np.float64)
        if plans.ndim != 3 or plans.shape[0] != len(histories) or plans.shape[1] != self.tau:
            raise ValueError(f"plans must be ({len(histories)}, {self.tau}, {D_A})")
        check_binary(plans, "plans")
        n = len(histories)
        t_max = max(h.length for h in histories)
        dynamic = np.zeros((n, t_max, histories[0].dynamic.shape[1]))
        statics = np.zeros((n, D_V))
        lengths = np.zeros(n, dtype=np.int64)
        for i, hist in enumerate(histories):
            dynamic[i, : hist.length] = self._normalize_dynamic(hist.dynamic)
            statics[i] = hist.statics
            lengths[i] = hist.length
        self.model_.eval()
        with torch.no_grad():
            est = self.model_(
                torch.as_tensor(dynamic, dtype=torch.float32),
                torch.as_tensor(statics, dtype=torch.float32),
                torch.as_tensor(plans, dtype=torch.float32),
                lengths=torch.as_tensor(lengths),
            )
        return self.stats_.denormalize_outcomes(est.numpy().astype(np.float64))

    def predict_counterfactual(self, trajectories: Sequence, plans: np.ndarray) -> np.ndarray:
        """Estimates at every anchor of full trajectories, one encoder pass each.

        Args:
          trajectories: raw-scale trajectories sharing length ``T``.
          plans: ``(n_traj, T - tau, tau, d_a)`` binary plans, one per anchor.
        Returns:
          ``(n_traj, T - tau, tau, d_y)`` raw-scale estimates.
        """
        self._require_fitted()
        plans = np.asarray(plans, dtype=np.float64)
        check_binary(plans, "plans")
        lengths = {t.length for t in trajectories}
        if len(lengths) != 1:
            raise ValueError("predict_counterfactual expects equal-length trajectories")
        t_len = lengths.pop()
        n_anchors = t_len - self.tau
        if plans.shape != (len(trajectories), n_anchors, self.tau, D_A):
            raise ValueError(
                f"plans must be ({len(trajectories)}, {n_anchors}, {self.tau}, {D_A}), got {plans.shape}"
            )
        dynamic = np.stack(
            [self._normalize_dynamic(history_from_trajectory(t).dynamic) for t in trajectories]
        )
        statics = np.stack([t.statics for t in trajectories])
        self.model_.eval()
        outputs = np.zeros((len(trajectories), n_anchors, self.tau, D_Y))
        chunk = 64
        with torch.no_grad():
            for start in range(0, len(trajectories), chunk):
                sl = slice(start, min(start + chunk, len(trajectories)))
                dyn = torch.as_tensor(dynamic[sl], dtype=torch.float32)
                sta = torch.as_tensor(statics[sl], dtype=torch.float32)
                z_s, _ = self.model_.encoder(dyn, sta)
                z = self.model_.encoder.aggregate(z_s).history[:, :n_anchors]
                b = dyn.shape[0]
                flat_reps = z.reshape(b * n_anchors, -1)
                flat_plans = torch.as_tensor(
                    plans[sl].reshape(b * n_anchors, self.tau, D_A), dtype=torch.float32
                )
                est = self.model_.decoder(flat_reps, flat_plans)
                outputs[sl] = est.view(b, n_anchors, self.tau, D_Y).numpy()
        return self.stats_.denormalize_outcomes(outputs)

    def score(self, histories: Sequence[History], plans: np.ndarray, targets: np.ndarray) -> float:
        """Negative RMSE over all horizons (higher is better)."""
        estimates = self.predict(histories, plans)
        targets = np.asarray(targets, dtype=np.float64)
        return -float(np.sqrt(np.mean((estimates - targets) ** 2)))

    # -- persistence --------------------------------------------------------------------
    def save(self, path: str | Path) -> Path:
        self._require_fitted()
        return save_model(
            self.model_,
            path,
            extra={
                "estimator_params": self.get_params(),
                "norm_stats": self.stats_.to_dict(),
                "val_metric": getattr(self, "val_metric_", None),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "TreatmentOutcomeRegressor":
        model, extra = load_model(path)
        est = cls(**extra["estimator_params"])
        est.model_ = model
        est.stats_ = NormStats.from_dict(extra["norm_stats"])
        est.val_metric_ = extra.get("val_metric")
        return est
