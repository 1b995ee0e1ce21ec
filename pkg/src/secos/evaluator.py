"""Classification accuracy vs. Hungarian-matched clustering accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


def _check_pair(pred, gt, num_classes=None):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred has {pred.size} labels but gt has {gt.size}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction list")
    if num_classes is not None:
        for name, a in (("pred", pred), ("gt", gt)):
            if a.min() < 0 or a.max() >= num_classes:
                raise ValueError(f"{name} labels outside [0, {num_classes})")
    return pred, gt


def _split_accuracy(pred, gt, n_known):
    hit = pred == gt
    known = gt < n_known
    out = {}
    for name, mask in (("known", known), ("novel", ~known), ("all", np.ones_like(known))):
        out[name] = float(hit[mask].mean()) if mask.any() else None
    return out


def acc_classify(pred, gt, label_space):
    """Direct accuracy; Known/Novel are None when the test set has no such samples."""
    pred, gt = _check_pair(pred, gt, len(label_space))
    return _split_accuracy(pred, gt, label_space.k)


def confusion(pred, gt, num_classes):
    """counts[p, g] = number of samples predicted p with ground truth g."""
    pred, gt = _check_pair(pred, gt, num_classes)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (pred, gt), 1)
    return m


def hungarian_match(pred, gt, num_classes):
    """Permutation W (W[p] = g) maximising agreement, lexicographically smallest among optima.

    The optimum is found with a cubic assignment solver; ties are then
    resolved row by row by fixing the smallest column that keeps the
    optimal total reachable.
    """
    counts = confusion(pred, gt, num_classes)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    best = int(counts[rows, cols].sum())

    perm = np.full(num_classes, -1, dtype=np.int64)
    free_cols = list(range(num_classes))
    gained = 0
    for r in range(num_classes):
        rest_rows = list(range(r + 1, num_classes))
        for c in free_cols:
            rest_cols = [x for x in free_cols if x != c]
            bound = int(counts[np.ix_(rest_rows, rest_cols)].max(axis=1).sum()) if rest_rows else 0
            if gained + int(counts[r, c]) + bound < best:
                continue
            if rest_rows:
                sub = counts[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub, maximize=True)
                tail = int(sub[rr, cc].sum())
            else:
                tail = 0
            if gained + int(counts[r, c]) + tail == best:
                perm[r] = c
                gained += int(counts[r, c])
                free_cols.remove(c)
                break
    return perm


def acc_cluster(pred, gt, label_space, matching=None):
    pred, gt = _check_pair(pred, gt, len(label_space))
    if matching is None:
        matching = hungarian_match(pred, gt, len(label_space))
    return _split_accuracy(np.asarray(matching)[pred], gt, label_space.k)


@dataclass(frozen=True)
class EvalReport:
    acc_classify: dict
    acc_cluster: dict
    matching: tuple
    confusion: tuple  # rows = predicted class, columns = true class

    def to_dict(self):
        return {
            "acc_classify": self.acc_classify,
            "acc_cluster": self.acc_cluster,
            "matching": list(self.matching),
            "confusion": [list(r) for r in self.confusion],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dict(d["acc_classify"]),
            dict(d["acc_cluster"]),
            tuple(int(x) for x in d["matching"]),
            tuple(tuple(int(x) for x in r) for r in d["confusion"]),
        )

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def report_from_predictions(pred, gt, label_space):
    pred, gt = _check_pair(pred, gt, len(label_space))
    w = hungarian_match(pred, gt, len(label_space))
    return EvalReport(
        acc_classify=acc_classify(pred, gt, label_space),
        acc_cluster=acc_cluster(pred, gt, label_space, w),
        matching=tuple(int(x) for x in w),
        confusion=tuple(tuple(int(x) for x in row) for row in confusion(pred, gt, len(label_space))),
    )


def evaluate(predict, test_inputs, gt, label_space):
    """Score a model on a test set under both protocols.

    ``predict`` maps inputs to a confidence matrix (or has a
    ``predict_proba`` method); predictions are its argmax over the full
    candidate set.
    """
    if len(gt) == 0:
        raise ValueError("empty test set")
    proba = predict.predict_proba(test_inputs) if hasattr(predict, "predict_proba") else predict(test_inputs)
    pred = np.asarray(proba).argmax(axis=1)
    return report_from_predictions(pred, gt, label_space)
