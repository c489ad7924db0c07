"""Scikit-learn style front end for the traction models.

``TractionRegressor`` wraps model construction, the training loop and
inference behind the familiar fit/predict/get_params surface so the models
compose with sklearn tooling (cloning, grid search, pipelines).  Inputs are
stacks of displacement fields (n_samples, 2, N, N); targets are traction
stacks of the same shape.  Fields are expected in the dimensionless units
produced by :class:`tfmforge.elasticity.Dataset`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .metrics import magnitude_field, nrmse
from .models import build_model
from .rng import RngStream
from .training import TrainConfig, train


def _validate_fields(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 2 or x.shape[2] != x.shape[3]:
        raise ValueError(f"{name} must have shape (n_samples, 2, N, N), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


class TractionRegressor(RegressorMixin, BaseEstimator):
    """Displacement-to-traction regressor with a selectable architecture.

    Parameters mirror :func:`tfmforge.models.build_model` plus the training
    schedule; ``val_fraction`` carves the early-stopping split out of the
    fitted data.
    """

    def __init__(self, model="hybrid", unet_widths=(64, 128, 256, 512),
                 vit_patch=8, vit_dim=256, vit_layers=6, vit_heads=8,
                 hybrid_dim=256, hybrid_layers=4, dropout=0.1,
                 lr=0.0002, gamma=0.9, decay_period=40, patience=10,
                 max_epochs=100, batch_size=8, val_fraction=0.15,
                 seed=0, dtype="float32"):
        self.model = model
        self.unet_widths = unet_widths
        self.vit_patch = vit_patch
        self.vit_dim = vit_dim
        self.vit_layers = vit_layers
        self.vit_heads = vit_heads
        self.hybrid_dim = hybrid_dim
        self.hybrid_layers = hybrid_layers
        self.dropout = dropout
        self.lr = lr
        self.gamma = gamma
        self.decay_period = decay_period
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.dtype = dtype

    def _build(self, n: int):
        return build_model(self.model, RngStream(self.seed, "init"), n=n,
                           unet_widths=tuple(self.unet_widths),
                           vit_patch=self.vit_patch, vit_dim=self.vit_dim,
                           vit_layers=self.vit_layers, vit_heads=self.vit_heads,
                           hybrid_dim=self.hybrid_dim,
                           hybrid_layers=self.hybrid_layers,
                           dropout=self.dropout, dtype=np.dtype(self.dtype).type)

    def fit(self, X, y, cell_types=None):
        X = _validate_fields(X, "X")
        y = _validate_fields(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
        dtype = np.dtype(self.dtype).type
        X = X.astype(dtype)
        y = y.astype(dtype)
        if cell_types is not None:
            cell_types = np.asarray(cell_types, dtype=np.int64)

        n_val = max(1, int(round(self.val_fraction * len(X))))
        if n_val >= len(X):
            raise ValueError(f"need at least 2 samples to fit, got {len(X)}")
        perm = RngStream(self.seed, "fit-split").permutation(len(X))
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        ct = (lambda i: cell_types[i]) if cell_types is not None else (lambda i: None)

        self.model_ = self._build(X.shape[-1])
        cfg = TrainConfig(lr0=self.lr, gamma=self.gamma,
                          decay_period=self.decay_period, patience=self.patience,
                          max_epochs=self.max_epochs, batch_size=self.batch_size,
                          seed=self.seed)
        self.train_result_ = train(self.model_,
                                   (X[tr_idx], y[tr_idx], ct(tr_idx)),
                                   (X[val_idx], y[val_idx], ct(val_idx)), cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, cell_types=None):
        if not hasattr(self, "model_"):
            raise ValueError("this TractionRegressor instance is not fitted yet")
        X = _validate_fields(X, "X").astype(np.dtype(self.dtype).type)
        out = []
        for k in range(len(X)):
            if self.model_.vocab is not None:
                ct = None if cell_types is None else np.asarray(cell_types)[k:k + 1]
                out.append(self.model_.predict(X[k], cell_type=ct))
            else:
                out.append(self.model_.predict(X[k]))
        return np.stack(out)

    def score(self, X, y, cell_types=None):
        """Negative mean NRMSE over samples (higher is better)."""
        pred = self.predict(X, cell_types=cell_types)
        y = _validate_fields(y, "y")
        values = [nrmse(magnitude_field(pred[k]), magnitude_field(y[k]))
                  for k in range(len(y))]
        return -float(np.mean(values))
