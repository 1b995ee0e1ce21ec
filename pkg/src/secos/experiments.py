"""Synthetic desk-scale benchmark and the experiment grids run on it."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from ._seeding import rng_for
from .bwsr import candidate_sets, select_batch_pseudo, unfiltered_batch_pseudo
from .datamodel import build_split
from .encoders import (
    SyntheticEncoder,
    SyntheticEncoderConfig,
    build_class_embeddings,
    make_synthetic_manifest,
    synthetic_prompt_bank,
)
from .evaluator import report_from_predictions
from .exceptions import ConfigError
from .trainer import TrainConfig, predict_proba, run_training, teacher_for

# The synthetic problem is tiny next to a real backbone, so it trains with a
# larger step size over fewer epochs than the full-scale defaults.
SYNTHETIC_TRAIN = {"epochs": 40, "lr": 1e-3}

ABLATIONS = {
    "none": {"use_global": False, "use_batch": False},
    "N": {"use_global": True, "use_batch": False},
    "B": {"use_global": False, "use_batch": True},
    "NB": {"use_global": True, "use_batch": True},
}


@dataclass
class BenchmarkConfig:
    n_classes: int = 10
    samples_per_class: int = 200
    test_per_class: int = 40
    ratio_labeled: float = 0.5
    known_fraction: float = 0.5
    n_prompts: int = 3
    split_seed: int = 0
    encoder: SyntheticEncoderConfig = field(default_factory=SyntheticEncoderConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = d.pop("encoder", {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown benchmark option(s): {', '.join(unknown)}")
        enc_names = {f.name for f in dataclasses.fields(SyntheticEncoderConfig)}
        bad = sorted(set(enc) - enc_names)
        if bad:
            raise ConfigError(f"unknown encoder option(s): {', '.join(bad)}")
        return cls(encoder=SyntheticEncoderConfig(**enc), **d)

    def to_dict(self):
        return dataclasses.asdict(self)


def make_benchmark_split(config):
    c = config
    manifest = make_synthetic_manifest(c.n_classes, c.samples_per_class, c.test_per_class)
    return build_split(manifest, c.ratio_labeled, c.known_fraction, None, seed=c.split_seed)


class SyntheticBenchmark:
    """Materialised split, encoder, class embeddings and test inputs."""

    def __init__(self, config=None, split=None):
        self.config = config or BenchmarkConfig()
        self.split = split if split is not None else make_benchmark_split(self.config)
        names = self.split.label_space.names
        self.encoder = SyntheticEncoder(self.config.encoder, names)
        self.prompts = synthetic_prompt_bank(names, self.config.n_prompts)
        self.class_embeds = build_class_embeddings(self.encoder, self.prompts, self.split.label_space)
        self.x_test = self.encoder.inputs(self.split.test, "none")
        self.y_test = np.array([r.true_label for r in self.split.test], dtype=np.int64)

    @property
    def label_space(self):
        return self.split.label_space

    def train_config(self, **overrides):
        return TrainConfig(**{**SYNTHETIC_TRAIN, **overrides})

    def evaluate(self, model, scale=100.0):
        ce = torch.as_tensor(self.class_embeds, dtype=torch.float64)
        pred = predict_proba(model, self.x_test, ce, scale).argmax(axis=1)
        return report_from_predictions(pred, self.y_test, self.label_space)

    def zero_shot(self, scale=100.0):
        proba = teacher_for(self.encoder, self.class_embeds, scale)(self.x_test)
        return report_from_predictions(proba.argmax(axis=1), self.y_test, self.label_space)

    def run(self, config, log_path=None):
        """Train one variant; returns (TrainResult, EvalReport)."""
        res = run_training(self.split, self.encoder, self.class_embeds, config, log_path=log_path)
        return res, self.evaluate(res.model, config.logit_scale)


def ablation_grid(bench, base):
    """Labeled-only, N-only, B-only and N+B variants of ``base``."""
    return {name: bench.run(base.replace(**flags)) for name, flags in ABLATIONS.items()}


def sweep(bench, base, key, values):
    return {v: bench.run(base.replace(**{key: v})) for v in values}


def filter_precision(bench, batch_sizes=(8, 16, 32, 64), alpha=0.6, beta=0.95, scale=100.0,
                     seed=0, passes=10):
    """Teacher pseudo-label precision of singleton vs. unfiltered selection.

    The unlabeled pool is streamed in shuffled batches of each size; weak
    views are scored by the frozen teacher. Returns
    ``{B: {"filtered": p, "unfiltered": p, "n_filtered": .., "n_unfiltered": ..}}``.
    """
    split = bench.split
    truth = dict(split.hidden_labels)
    ids = [r.sample_id for r in split.unlabeled]
    x_u = bench.encoder.inputs(split.unlabeled, "none")
    teacher = teacher_for(bench.encoder, bench.class_embeds, scale)
    out = {}
    for b in batch_sizes:
        rng = rng_for(seed, f"filter_precision/{b}")
        hits = {"filtered": 0, "unfiltered": 0}
        counts = {"filtered": 0, "unfiltered": 0}
        for _ in range(passes):
            order = rng.permutation(len(ids))
            for start in range(0, len(order), b):
                rows = order[start:start + b]
                conf = teacher(bench.encoder.augment(x_u[rows], "weak", rng))
                bid = [ids[i] for i in rows]
                _, cands = candidate_sets(conf, alpha, beta)
                for name, sel in (("filtered", select_batch_pseudo(cands, bid, conf)),
                                  ("unfiltered", unfiltered_batch_pseudo(cands, conf, bid))):
                    counts[name] += len(sel)
                    hits[name] += sum(int(truth[e.sample_id] == e.label) for e in sel)
        out[b] = {
            name: (hits[name] / counts[name]) if counts[name] else None for name in hits
        } | {f"n_{name}": counts[name] for name in counts}
    return out
