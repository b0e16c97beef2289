"""scikit-learn compatible front end for the training engine."""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import ValidationError
from .data import ReIDDataset
from .engine import TrainConfig, extract_features, fit, load_checkpoint


class DisentangledReIDEncoder(TransformerMixin, BaseEstimator):
    """Trains an identity encoder whose non-biometric content is pushed out.

    ``fit`` takes inputs ``X``, identity labels ``y``, optional camera ids and
    per-aspect text features (``{"biometric": (n, d), "clothing": (n, d), ...}``).
    ``transform`` returns the entangled feature used for retrieval; ``predict``
    returns identity labels from the classifier head.

    With ``baseline=True`` only the identity loss is optimised.
    """

    def __init__(
        self,
        feature_dim=64,
        subspace_dim=32,
        encoder_kind="toy-mlp",
        hidden_dim=128,
        image_shape=None,
        factors=("hair", "clothing"),
        baseline=False,
        epochs=60,
        base_lr=2e-6,
        warmup_initial_lr=8.42e-7,
        warmup_epochs=5,
        momentum=0.9,
        weight_decay=0.05,
        triplet_margin=0.3,
        triplet_reduction="sum",
        temperature=1.0,
        lambda_id=1.0,
        lambda_b=1.0,
        lambda_n=1.0,
        lambda_c=1.0,
        lambda_t=1.0,
        grl_coefficient=1.0,
        P=4,
        K=4,
        random_state=0,
    ):
        self.feature_dim = feature_dim
        self.subspace_dim = subspace_dim
        self.encoder_kind = encoder_kind
        self.hidden_dim = hidden_dim
        self.image_shape = image_shape
        self.factors = factors
        self.baseline = baseline
        self.epochs = epochs
        self.base_lr = base_lr
        self.warmup_initial_lr = warmup_initial_lr
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.triplet_margin = triplet_margin
        self.triplet_reduction = triplet_reduction
        self.temperature = temperature
        self.lambda_id = lambda_id
        self.lambda_b = lambda_b
        self.lambda_n = lambda_n
        self.lambda_c = lambda_c
        self.lambda_t = lambda_t
        self.grl_coefficient = grl_coefficient
        self.P = P
        self.K = K
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        model = {"feature_dim": self.feature_dim, "subspace_dim": self.subspace_dim,
                 "encoder_kind": self.encoder_kind, "hidden_dim": self.hidden_dim}
        if self.image_shape is not None:
            model["image_shape"] = list(self.image_shape)
        return TrainConfig(
            epochs=self.epochs, base_lr=self.base_lr, warmup_initial_lr=self.warmup_initial_lr,
            warmup_epochs=self.warmup_epochs, momentum=self.momentum, weight_decay=self.weight_decay,
            seed=self.random_state, lambda_id=self.lambda_id, lambda_b=self.lambda_b,
            lambda_n=self.lambda_n, lambda_c=self.lambda_c, lambda_t=self.lambda_t,
            grl_coefficient=self.grl_coefficient, triplet_margin=self.triplet_margin,
            triplet_reduction=self.triplet_reduction, temperature=self.temperature,
            factors=list(self.factors), baseline=self.baseline, P=self.P, K=self.K, model=model,
        )

    def _check_X(self, X, reset: bool):
        X = check_array(X, dtype=np.float32, allow_nd=True, ensure_min_samples=1)
        n_in = int(np.prod(X.shape[1:]))
        if reset:
            self.n_features_in_ = n_in
        elif n_in != self.n_features_in_:
            raise ValueError(f"X has {n_in} features, but this encoder was fitted with {self.n_features_in_}")
        return X

    @staticmethod
    def _camids(camids, n):
        if camids is None:
            return np.zeros(n, dtype=np.int64)
        camids = np.asarray(camids, dtype=np.int64)
        if camids.shape != (n,):
            raise ValidationError(f"camids must have shape ({n},)")
        return camids

    def fit(self, X, y, camids=None, text_features: Optional[Mapping[str, np.ndarray]] = None):
        X = self._check_X(X, reset=True)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be a 1-D array with one label per sample")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        text = {}
        for k, v in (text_features or {}).items():
            v = check_array(v, dtype=np.float32)
            if v.shape[0] != X.shape[0]:
                raise ValueError(f"text_features[{k!r}] has {v.shape[0]} rows, expected {X.shape[0]}")
            text[k] = v
        data = ReIDDataset(
            inputs=X, pids=y_idx, camids=self._camids(camids, X.shape[0]),
            clothids=np.full(X.shape[0], -1), image_ids=[str(i) for i in range(X.shape[0])],
            text_features=text,
        )
        result = fit(self.train_config(), data)
        self.model_ = result.state.model
        self.history_ = result.metrics
        return self

    def transform(self, X, camids=None):
        check_is_fitted(self, "model_")
        X = self._check_X(X, reset=False)
        data = ReIDDataset(X, np.zeros(len(X), dtype=int), self._camids(camids, len(X)),
                           np.zeros(len(X), dtype=int), [""] * len(X))
        return extract_features(self.model_, data)

    @torch.no_grad()
    def predict(self, X, camids=None):
        f = torch.from_numpy(self.transform(X, camids))
        self.model_.eval()
        return self.classes_[self.model_.classifier(f).argmax(dim=1).numpy()]

    def score(self, X, y, camids=None) -> float:
        return float(np.mean(self.predict(X, camids) == np.asarray(y)))

    @classmethod
    def from_checkpoint(cls, path) -> "DisentangledReIDEncoder":
        """Wrap a checkpoint written by the engine; ``classes_`` are the original pids."""
        state, label_map, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train_config"])
        mcfg = state.model.cfg
        params = cls().get_params()
        kwargs = {k: getattr(cfg, k) for k in params if hasattr(cfg, k)}
        kwargs.update({k: getattr(mcfg, k) for k in ("feature_dim", "subspace_dim", "encoder_kind",
                                                      "hidden_dim", "image_shape")})
        kwargs.update(factors=tuple(cfg.factors), random_state=cfg.seed)
        est = cls(**kwargs)
        est.model_ = state.model
        inv = sorted(label_map, key=label_map.get)
        est.classes_ = np.asarray(inv)
        est.n_features_in_ = state.model.cfg.input_dim
        return est
