"""scikit-learn style front end over the training pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datamodel import DatasetSplit, LabelSpace, SampleRecord
from .encoders import check_class_embeddings
from .ncsc import build_dn
from .trainer import TrainConfig, build_model, predict_proba, teacher_for, train

UNLABELED = -1


def check_inputs(X, dim=None):
    """Float64 array of backbone inputs, shape (n, d) or (n, tokens, d)."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=1)
    if X.ndim not in (2, 3):
        raise ValueError(f"inputs must be 2-D or 3-D, got {X.ndim}-D")
    if dim is not None and X.shape[-1] != dim:
        raise ValueError(f"inputs have feature dimension {X.shape[-1]}, expected {dim}")
    return X


def check_partial_labels(y, n_samples, n_known):
    """Integer labels where -1 marks unlabeled; labeled entries must be known classes."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("y must hold integer class indices")
        y = y.astype(np.int64)
    bad = (y != UNLABELED) & ((y < 0) | (y >= n_known))
    if bad.any():
        raise ValueError(f"labeled targets must lie in [0, {n_known}); unlabeled samples use {UNLABELED}")
    if not (y != UNLABELED).any():
        raise ValueError("at least one labeled sample is required")
    return y.astype(np.int64)


class SECOSClassifier(ClassifierMixin, BaseEstimator):
    """Open-world classifier over a fixed candidate label space.

    ``encoder`` supplies the frozen backbone, its reference projection,
    ``reference_features`` (the frozen teacher) and ``augment``. Classes
    ``0 .. n_known-1`` are known; the remaining rows of
    ``class_embeddings`` are novel classes that never appear in ``y``.

    ``fit(X, y)`` takes ``y == -1`` for unlabeled samples. Predictions range
    over all classes, novel ones included.
    """

    def __init__(self, encoder=None, class_embeddings=None, n_known=1, class_names=None,
                 epochs=100, batch_size=32, lr=1e-4, weight_decay=1e-5, alpha=0.6, beta=0.95,
                 phi=50, logit_scale=100.0, teacher_mode="teacher", ema_decay=0.999,
                 adapter_dim=10, use_global=True, use_batch=True, seed=0):
        self.encoder = encoder
        self.class_embeddings = class_embeddings
        self.n_known = n_known
        self.class_names = class_names
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.phi = phi
        self.logit_scale = logit_scale
        self.teacher_mode = teacher_mode
        self.ema_decay = ema_decay
        self.adapter_dim = adapter_dim
        self.use_global = use_global
        self.use_batch = use_batch
        self.seed = seed

    def _train_config(self):
        keys = ("epochs", "batch_size", "lr", "weight_decay", "alpha", "beta", "phi", "logit_scale",
                "teacher_mode", "ema_decay", "adapter_dim", "use_global", "use_batch", "seed")
        return TrainConfig(**{k: getattr(self, k) for k in keys})

    def _label_space(self, n_classes):
        if not 1 <= self.n_known < n_classes:
            raise ValueError(f"n_known must lie in [1, {n_classes}), got {self.n_known}")
        names = list(self.class_names) if self.class_names is not None else [f"class_{i}" for i in range(n_classes)]
        if len(names) != n_classes:
            raise ValueError(f"{len(names)} class names for {n_classes} class embeddings")
        return LabelSpace(tuple(names[: self.n_known]), tuple(names[self.n_known:]))

    def fit(self, X, y):
        if self.encoder is None or self.class_embeddings is None:
            raise ValueError("encoder and class_embeddings are required")
        embeds = check_class_embeddings(np.asarray(self.class_embeddings, dtype=np.float64))
        space = self._label_space(embeds.shape[0])
        X = check_inputs(X)
        y = check_partial_labels(y, X.shape[0], space.k)
        config = self._train_config()

        lab = np.flatnonzero(y != UNLABELED)
        unl = np.flatnonzero(y == UNLABELED)
        u_ids = [f"u{i:07d}" for i in unl]
        split = DatasetSplit(
            labeled=[SampleRecord(f"l{i:07d}", f"row:{i}", int(y[i])) for i in lab],
            unlabeled=[SampleRecord(sid, f"row:{i}") for sid, i in zip(u_ids, unl)],
            test=[],
            label_space=space,
        )
        model = build_model(self.encoder.backbone, self.encoder.projection, embeds.shape[1], config)
        teacher = teacher_for(self.encoder, embeds, config.logit_scale) if config.teacher_mode == "teacher" else None
        dn = None
        x_u = X[unl]
        if config.use_global and len(unl):
            if teacher is not None:
                conf_u = teacher(x_u)
            else:
                conf_u = predict_proba(model, x_u, torch.as_tensor(embeds), config.logit_scale)
            dn = build_dn(split, conf_u, config.phi, u_ids)
        elif config.use_global:
            config = config.replace(use_global=False)

        result = train(model, embeds, X[lab], y[lab], x_u, u_ids, config, self.encoder.augment,
                       teacher, dn=dn)
        self.model_ = result.model
        self.log_ = result.log
        self.dn_ = result.dn
        self.label_space_ = space
        self.classes_ = np.arange(len(space))
        self.n_features_in_ = X.shape[-1]
        self._embeds = torch.as_tensor(embeds)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.n_features_in_)
        return predict_proba(self.model_, X, self._embeds, self.logit_scale)

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.n_features_in_)
        with torch.no_grad():
            return self.model_.logits(torch.as_tensor(X), self._embeds, self.logit_scale).numpy()

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
