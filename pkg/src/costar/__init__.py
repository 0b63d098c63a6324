"""Counterfactual treatment-outcome estimation over time.

Subpackages: ``pkpd`` (confounded tumor-growth simulator), ``data`` (dataset
containers, normalization, batching), ``encoder`` (dual-attention history
encoder), ``pretrain`` (momentum contrastive pretraining), ``decoder``
(non-autoregressive multi-horizon predictor), ``estimator`` (sklearn-style
fit/predict surface), ``theory`` (positive-pair-graph checks), ``harness``
(experiment protocols and reports), ``cli`` (the ``costar`` command).
"""

__version__ = "0.1.0"
