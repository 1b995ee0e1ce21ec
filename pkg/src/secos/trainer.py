"""Training loop over labeled, global pseudo-labeled and batch pseudo-labeled data.

Each optimizer step draws a labeled minibatch B_L, a minibatch B_N of the
global novel set and an unlabeled minibatch B_U. B_U is scored by the
pseudo-label source (frozen teacher, or an EMA copy of the student) and
reduced to B_P by batch-wise recapture. Every sample contributes the loss
of a weak and a strong view; the three per-source means are summed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ._seeding import rng_for, sub_seed
from .adapter_net import AdapterNetwork, multiview_loss
from .bwsr import candidate_sets, select_batch_pseudo, unfiltered_batch_pseudo
from .encoders import confidence_matrix, ema_update, softmax
from .exceptions import ConfigError
from .ncsc import PseudoLabelSet, build_dn

logger = logging.getLogger(__name__)

TEACHER_MODES = ("teacher", "ema")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    schedule: object = "linear"  # "linear", "constant" or an explicit per-epoch factor list
    final_lr_factor: float = 0.1
    alpha: float = 0.6
    beta: float = 0.95
    phi: float = 50
    logit_scale: float = 100.0
    teacher_mode: str = "teacher"
    ema_decay: float = 0.999
    adapter_dim: int = 10
    adapter_scale: float = 1.0
    learnable_scale: bool = False
    use_global: bool = True
    use_batch: bool = True
    filter_singleton: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"teacher_mode must be one of {TEACHER_MODES}, got {self.teacher_mode!r}")
        if not 0 < self.alpha <= 1 or not 0 < self.beta <= 1:
            raise ConfigError("alpha and beta must lie in (0, 1]")
        if not 0 < self.phi <= 100:
            raise ConfigError("phi must lie in (0, 100]")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")
        if isinstance(self.schedule, str) and self.schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def lr_factors(config):
    """Per-epoch multiplicative learning-rate factors."""
    n = config.epochs
    if isinstance(config.schedule, (list, tuple)):
        if len(config.schedule) < n:
            raise ConfigError(f"schedule lists {len(config.schedule)} factors for {n} epochs")
        return [float(f) for f in config.schedule[:n]]
    if config.schedule == "constant" or n <= 1:
        return [1.0] * n
    drop = 1.0 - config.final_lr_factor
    return [1.0 - drop * e / (n - 1) for e in range(n)]


@dataclass
class StepBatch:
    x_l: np.ndarray
    y_l: np.ndarray
    x_n: np.ndarray
    y_n: np.ndarray
    x_u: np.ndarray
    u_ids: list
    u_truth: Optional[dict] = None
    l_ids: Optional[list] = None
    n_ids: Optional[list] = None


@dataclass
class TrainState:
    model: AdapterNetwork
    optimizer: torch.optim.Optimizer
    class_embeds: torch.Tensor
    augment: Callable
    teacher_proba: Optional[Callable]
    rng: np.random.Generator
    ema_model: Optional[AdapterNetwork] = None
    step: int = 0

    def score_unlabeled(self, x, config):
        if config.teacher_mode == "ema":
            return predict_proba(self.ema_model, x, self.class_embeds, config.logit_scale)
        return self.teacher_proba(x)


def _tensor(x, like):
    return torch.as_tensor(np.asarray(x), dtype=like.dtype)


def predict_proba(model, x, class_embeds, scale):
    with torch.no_grad():
        logits = model.logits(_tensor(x, class_embeds), class_embeds, scale)
    return softmax(logits.numpy())


def _source_loss(state, x, y, ids, config):
    if len(y) == 0:
        return None
    views = [_tensor(state.augment(x, v, state.rng), state.class_embeds) for v in ("weak", "strong")]
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    return multiview_loss(state.model, views, y, state.class_embeds, config.logit_scale, ids)


def train_step(state, batch, config, lr=None):
    """One optimizer update; returns a metrics dict."""
    metrics = {"n_bl": len(batch.y_l), "n_bn": len(batch.y_n), "n_bu": len(batch.u_ids), "n_bp": 0}
    x_p, y_p, p_ids = None, np.zeros(0, dtype=np.int64), []
    if config.use_batch and len(batch.u_ids):
        weak = state.augment(batch.x_u, "weak", state.rng)
        conf = state.score_unlabeled(weak, config)
        _, cands = candidate_sets(conf, config.alpha, config.beta)
        select = select_batch_pseudo if config.filter_singleton else (
            lambda c, ids, cf: unfiltered_batch_pseudo(c, cf, ids))
        bp = select(cands, batch.u_ids, conf)
        pos = {sid: i for i, sid in enumerate(batch.u_ids)}
        rows = [pos[e.sample_id] for e in bp]
        x_p, y_p, p_ids = batch.x_u[rows], bp.labels, bp.sample_ids
        metrics["n_bp"] = len(bp)
        if batch.u_truth is not None:
            metrics["precision_bp"] = bp.precision(batch.u_truth)

    terms = {}
    for name, x, y, ids in (("loss_L", batch.x_l, batch.y_l, batch.l_ids),
                            ("loss_N", batch.x_n, batch.y_n, batch.n_ids),
                            ("loss_P", x_p, y_p, p_ids)):
        terms[name] = _source_loss(state, x, y, ids, config)
        metrics[name] = terms[name].item() if terms[name] is not None else 0.0

    present = [t for t in terms.values() if t is not None]
    if not present:
        warnings.warn("empty B_L, B_N and B_P; skipping optimizer step", RuntimeWarning)
        metrics["skipped"] = True
        metrics["loss"] = 0.0
        return metrics
    total = present[0]
    for t in present[1:]:
        total = total + t
    metrics["loss"] = total.item()

    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    metrics["lr"] = state.optimizer.param_groups[0]["lr"]
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.ema_model is not None:
        ema_update(state.ema_model.trainable_state(), state.model.trainable_state(), config.ema_decay)
    state.step += 1
    return metrics


class _Cycler:
    """Endless minibatch index stream, reshuffled on every pass."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        need = min(self.batch_size, self.n)
        while need:
            if self._pos >= len(self._order):
                self._order, self._pos = self.rng.permutation(self.n), 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


def build_model(backbone, projection, d_text, config, dtype=torch.float64):
    return AdapterNetwork(
        backbone, d_text, rank=config.adapter_dim, adapter_scale=config.adapter_scale,
        learnable_scale=config.learnable_scale, projection=projection,
        seed=sub_seed(config.seed, "init"),
    ).to(dtype)


def make_optimizer(model, config):
    return torch.optim.AdamW([p for _, p in model.named_trainable()], lr=config.lr,
                             weight_decay=config.weight_decay)


@dataclass
class TrainResult:
    model: AdapterNetwork
    log: list = field(default_factory=list)
    dn: Optional[PseudoLabelSet] = None
    ema_model: Optional[AdapterNetwork] = None


def train(model, class_embeds, x_l, y_l, x_u, u_ids, config, augment, teacher_proba=None,
          dn=None, u_truth=None, log_fh=None):
    """Run the full epoch loop in place on ``model``.

    ``dn`` is the fixed global novel set (built from the stage-start scorer
    when omitted and ``use_global`` is on). Epochs are passes over the
    unlabeled pool; labeled and D_N streams cycle with reshuffling.
    """
    class_embeds = torch.as_tensor(np.asarray(class_embeds), dtype=next(model.projector.parameters()).dtype)
    if teacher_proba is None and config.teacher_mode == "teacher":
        raise ValueError("teacher mode needs a teacher_proba callable")
    if teacher_proba is None:
        # stage-start student snapshot builds D_N in the teacher-free variant
        snapshot = copy.deepcopy(model)
        teacher_proba = lambda x: predict_proba(snapshot, x, class_embeds, config.logit_scale)  # noqa: E731

    u_pos = {sid: i for i, sid in enumerate(u_ids)}
    if config.use_global:
        if dn is None:
            raise ValueError("use_global requires a prebuilt D_N")
        n_rows = np.array([u_pos[e.sample_id] for e in dn], dtype=np.int64)
        x_n, y_n, n_ids = x_u[n_rows] if len(n_rows) else x_u[:0], dn.labels, dn.sample_ids
    else:
        x_n, y_n, n_ids = x_u[:0], np.zeros(0, dtype=np.int64), []

    state = TrainState(
        model=model, optimizer=make_optimizer(model, config), class_embeds=class_embeds,
        augment=augment, teacher_proba=teacher_proba, rng=rng_for(config.seed, "augment"),
        ema_model=copy.deepcopy(model) if config.teacher_mode == "ema" else None,
    )
    l_stream = _Cycler(len(y_l), config.batch_size, rng_for(config.seed, "stream/labeled"))
    n_stream = _Cycler(len(y_n), config.batch_size, rng_for(config.seed, "stream/novel"))
    u_rng = rng_for(config.seed, "stream/unlabeled")
    y_l = np.asarray(y_l, dtype=np.int64)
    log = []
    for epoch, factor in enumerate(lr_factors(config)):
        order = u_rng.permutation(len(u_ids))
        for start in range(0, max(len(order), 1), config.batch_size):
            u_idx = order[start:start + config.batch_size]
            li, ni = l_stream.next(), n_stream.next()
            batch = StepBatch(
                x_l=x_l[li], y_l=y_l[li], x_n=x_n[ni], y_n=y_n[ni],
                x_u=x_u[u_idx], u_ids=[u_ids[i] for i in u_idx], u_truth=u_truth,
                l_ids=[f"labeled[{i}]" for i in li], n_ids=[n_ids[i] for i in ni],
            )
            m = train_step(state, batch, config, lr=config.lr * factor)
            rec = {"epoch": epoch, "step": state.step, **m}
            log.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
    return TrainResult(model=model, log=log, dn=dn, ema_model=state.ema_model)


def teacher_for(encoder, class_embeds, scale):
    """Frozen-teacher confidence function over raw backbone inputs."""
    return lambda x: confidence_matrix(encoder.reference_features(x), class_embeds, scale)


def run_training(split, encoder, class_embeds, config, log_path=None, dn=None):
    """Train an adapter network on a dataset split with a synthetic-style encoder.

    Returns a :class:`TrainResult`; the per-step log is also written as JSON
    lines to ``log_path`` when given.
    """
    model = build_model(encoder.backbone, encoder.projection, np.asarray(class_embeds).shape[1], config)
    if config.epochs == 0:
        return TrainResult(model=model, log=[], dn=dn)
    x_l = encoder.inputs(split.labeled, "none")
    y_l = np.array([r.true_label for r in split.labeled], dtype=np.int64)
    u_ids = [r.sample_id for r in split.unlabeled]
    x_u = encoder.inputs(split.unlabeled, "none")
    teacher = teacher_for(encoder, class_embeds, config.logit_scale) if config.teacher_mode == "teacher" else None
    if config.use_global and dn is None:
        if teacher is not None:
            conf_u = teacher(x_u)
        else:
            ce = torch.as_tensor(np.asarray(class_embeds), dtype=torch.float64)
            conf_u = predict_proba(model, x_u, ce, config.logit_scale)
        dn = build_dn(split, conf_u, config.phi, u_ids)
    truth = dict(split.hidden_labels) if split.hidden_labels else None
    fh = open(log_path, "w") if log_path else None
    try:
        return train(model, class_embeds, x_l, y_l, x_u, u_ids, config, encoder.augment,
                     teacher, dn=dn, u_truth=truth, log_fh=fh)
    finally:
        if fh is not None:
            fh.close()
