"""Global pseudo-labeled novel set built from frozen-teacher confidences.

Every unlabeled sample gets its argmax class; samples are grouped per class,
and for each *novel* class the top-phi% most confident members are kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .encoders import check_confidence_matrix

logger = logging.getLogger(__name__)


class PseudoLabel(NamedTuple):
    sample_id: str
    label: int
    confidence: float


@dataclass(frozen=True)
class PseudoLabelSet:
    entries: tuple
    origin: str  # "global" | "batch"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("pseudo-label set contains a sample twice")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def sample_ids(self):
        return [e.sample_id for e in self.entries]

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def precision(self, truth):
        """Fraction of entries whose label matches ``truth[sample_id]``; None if empty."""
        if not self.entries:
            return None
        return sum(truth[e.sample_id] == e.label for e in self.entries) / len(self.entries)


@dataclass(frozen=True)
class ClassGroup:
    label: int
    members: tuple  # (sample_id, confidence), confidence desc then id asc

    @property
    def size(self):
        return len(self.members)


def assign_hard_pseudo_labels(conf, sample_ids=None):
    """Argmax class and its probability per row; ties go to the lowest index."""
    conf = check_confidence_matrix(conf)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(conf.shape[0])]
    if len(sample_ids) != conf.shape[0]:
        raise ValueError(f"{len(sample_ids)} sample ids for {conf.shape[0]} confidence rows")
    labels = conf.argmax(axis=1)
    best = conf[np.arange(conf.shape[0]), labels]
    return [PseudoLabel(str(s), int(c), float(p)) for s, c, p in zip(sample_ids, labels, best)]


def group_by_class(hard_labels, num_classes):
    buckets = [[] for _ in range(num_classes)]
    for sid, label, confidence in hard_labels:
        buckets[label].append((sid, confidence))
    return [
        ClassGroup(c, tuple(sorted(members, key=lambda m: (-m[1], m[0]))))
        for c, members in enumerate(buckets)
    ]


def top_phi_count(size, phi):
    """ceil(phi/100 * size), at least 1 for a non-empty group."""
    if not 0 < phi <= 100:
        raise ValueError(f"phi must lie in (0, 100], got {phi}")
    if size == 0:
        return 0
    q = Fraction(repr(float(phi))) if isinstance(phi, float) else Fraction(phi)
    return max(1, math.ceil(q * size / 100))


def select_top_phi(group, phi):
    return list(group.members[: top_phi_count(group.size, phi)])


def build_dn(split, conf, phi=50, sample_ids=None):
    """Top-phi% of each novel-class argmax group, in class order.

    ``conf`` rows follow ``split.unlabeled``. Known-class groups are
    discarded. An empty result carries a warning in ``diagnostics``.
    """
    space = split.label_space
    if sample_ids is None:
        sample_ids = [r.sample_id for r in split.unlabeled]
    conf = check_confidence_matrix(conf)
    if conf.shape != (len(sample_ids), len(space)):
        raise ValueError(
            f"confidence matrix shape {conf.shape} does not cover "
            f"{len(sample_ids)} unlabeled samples x {len(space)} classes"
        )
    groups = group_by_class(assign_hard_pseudo_labels(conf, sample_ids), len(space))
    entries = []
    per_class = {}
    for g in groups[space.k:]:
        chosen = select_top_phi(g, phi)
        per_class[space.names[g.label]] = {"group_size": g.size, "selected": len(chosen)}
        entries.extend(PseudoLabel(sid, g.label, p) for sid, p in chosen)
    diagnostics = {
        "phi": phi,
        "per_class": per_class,
        "known_argmax": sum(g.size for g in groups[: space.k]),
        "size": len(entries),
        "labeled_size": len(split.labeled),
        "warnings": [],
    }
    if not entries:
        msg = "no unlabeled sample has a novel-class argmax; D_N is empty"
        diagnostics["warnings"].append(msg)
        logger.warning(msg)
    if split.hidden_labels and entries:
        diagnostics["precision"] = sum(split.hidden_labels.get(e.sample_id) == e.label for e in entries) / len(entries)
    return PseudoLabelSet(tuple(entries), "global", diagnostics)


def export_dn(dn, label_space, path):
    """Write ``sample_id<TAB>class name<TAB>confidence`` lines."""
    lines = [f"{e.sample_id}\t{label_space.names[e.label]}\t{e.confidence!r}" for e in dn]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_dn(path, label_space):
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            sid, name, conf = line.split("\t")
            entries.append(PseudoLabel(sid, label_space.index(name), float(conf)))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed pseudo-label line ({exc})") from exc
    return PseudoLabelSet(tuple(entries), "global")
