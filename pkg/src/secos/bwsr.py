"""Batch-wise candidate labels from intra- and inter-instance thresholds.

For a batch confidence matrix:

* tau is the alpha nearest-rank quantile of the per-row maxima; each
  sample's intra set accumulates classes by descending confidence until the
  running sum strictly exceeds tau;
* theta_c is the beta nearest-rank quantile of column c; the inter set of a
  sample holds classes whose confidence strictly exceeds theta_c;
* a sample is pseudo-labeled only when the two sets intersect in exactly one
  class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .encoders import check_confidence_matrix
from .ncsc import PseudoLabel, PseudoLabelSet


@dataclass(frozen=True)
class BatchThresholds:
    tau: float
    theta: np.ndarray


@dataclass(frozen=True)
class CandidateSets:
    intra: tuple  # per sample: tuple of class indices in insertion order
    inter: tuple  # per sample: frozenset of class indices

    def __len__(self):
        return len(self.intra)

    def intersections(self):
        return [frozenset(a).intersection(b) for a, b in zip(self.intra, self.inter)]


def nearest_rank(q, n):
    """1-based rank ceil(q * n), clamped to [1, n]."""
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    if n < 1:
        raise ValueError("quantile of an empty batch")
    exact = Fraction(repr(float(q))) if isinstance(q, float) else Fraction(q)
    return min(n, max(1, math.ceil(exact * n)))


def batch_tau(conf, alpha):
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] == 0:
        raise ValueError("batch_tau needs a non-empty batch")
    maxima = np.sort(conf.max(axis=1))
    return float(maxima[nearest_rank(alpha, len(maxima)) - 1])


def intra_sets(conf, tau):
    conf = np.asarray(conf, dtype=np.float64)
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    k = conf.shape[1]
    # stable sort on the negated row keeps ascending class index among ties
    order = np.argsort(-conf, axis=1, kind="stable")
    running = np.cumsum(np.take_along_axis(conf, order, axis=1), axis=1)
    over = running > tau
    sizes = np.where(over.any(axis=1), over.argmax(axis=1) + 1, k)
    return tuple(tuple(int(c) for c in order[i, : sizes[i]]) for i in range(conf.shape[0]))


def class_thresholds(conf, beta):
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] == 0:
        raise ValueError("class_thresholds needs a non-empty batch")
    return np.sort(conf, axis=0)[nearest_rank(beta, conf.shape[0]) - 1].copy()


def inter_sets(conf, theta):
    conf = np.asarray(conf, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (conf.shape[1],):
        raise ValueError(f"theta has shape {theta.shape}, expected ({conf.shape[1]},)")
    above = conf > theta[None, :]
    return tuple(frozenset(int(c) for c in np.flatnonzero(row)) for row in above)


def select_batch_pseudo(candidates, sample_ids=None, conf=None):
    """Keep samples whose intra/inter intersection is a single class."""
    if len(candidates.intra) != len(candidates.inter):
        raise ValueError("intra and inter sets cover different batches")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(candidates))]
    entries = []
    for i, common in enumerate(candidates.intersections()):
        if len(common) == 1:
            (label,) = common
            p = float(conf[i, label]) if conf is not None else float("nan")
            entries.append(PseudoLabel(str(sample_ids[i]), label, p))
    return PseudoLabelSet(tuple(entries), "batch")


def unfiltered_batch_pseudo(candidates, conf, sample_ids=None):
    """Raw-intersection variant: any non-empty intersection is kept.

    The label is the most confident class of the intersection.
    """
    conf = np.asarray(conf, dtype=np.float64)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(candidates))]
    entries = []
    for i, common in enumerate(candidates.intersections()):
        if common:
            label = min(common, key=lambda c: (-conf[i, c], c))
            entries.append(PseudoLabel(str(sample_ids[i]), label, float(conf[i, label])))
    return PseudoLabelSet(tuple(entries), "batch")


def candidate_sets(conf, alpha, beta):
    conf = check_confidence_matrix(conf)
    tau = batch_tau(conf, alpha)
    theta = class_thresholds(conf, beta)
    return BatchThresholds(tau, theta), CandidateSets(intra_sets(conf, tau), inter_sets(conf, theta))


def recapture_batch(conf, alpha=0.6, beta=0.95, sample_ids=None):
    conf = check_confidence_matrix(conf)
    _, cands = candidate_sets(conf, alpha, beta)
    return select_batch_pseudo(cands, sample_ids, conf)


def debug_record(conf, alpha, beta, sample_ids=None, truth=None):
    """JSON-ready dump of one batch: thresholds, candidate sets and both selections."""
    conf = check_confidence_matrix(conf)
    thresholds, cands = candidate_sets(conf, alpha, beta)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(conf.shape[0])]
    filtered = select_batch_pseudo(cands, sample_ids, conf)
    raw = unfiltered_batch_pseudo(cands, conf, sample_ids)
    rec = {
        "tau": thresholds.tau,
        "theta": thresholds.theta.tolist(),
        "samples": [
            {"id": str(s), "intra": list(a), "inter": sorted(b)}
            for s, a, b in zip(sample_ids, cands.intra, cands.inter)
        ],
        "filtered": {e.sample_id: e.label for e in filtered},
        "unfiltered": {e.sample_id: e.label for e in raw},
    }
    if truth is not None:
        rec["precision_filtered"] = filtered.precision(truth)
        rec["precision_unfiltered"] = raw.precision(truth)
    return rec


def dumps_debug(records):
    return "".join(json.dumps(r) + "\n" for r in records)
