"""Label space, dataset splits and sample records.

A manifest lists classes in order; :func:`build_split` turns it into the
labeled / unlabeled / test partition used by every later stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional

from ._seeding import rng_for
from .exceptions import ManifestError

SPLIT_FORMAT_VERSION = 1


def _exact(q):
    # decimal repr keeps 0.7 * 10 == 7 instead of 7.000000000000001
    return Fraction(repr(float(q))) if isinstance(q, float) else Fraction(q)


@dataclass(frozen=True)
class LabelSpace:
    known: tuple
    novel: tuple

    def __post_init__(self):
        object.__setattr__(self, "known", tuple(self.known))
        object.__setattr__(self, "novel", tuple(self.novel))
        if len(self.known) < 1 or len(self.novel) < 1:
            raise ManifestError(
                f"label space needs at least one known and one novel class "
                f"(got k={len(self.known)}, n={len(self.novel)})"
            )
        names = self.known + self.novel
        if len(set(names)) != len(names):
            dupes = sorted({c for c in names if names.count(c) > 1})
            raise ManifestError(f"duplicate class names in label space: {dupes}")

    @property
    def names(self):
        return self.known + self.novel

    @property
    def k(self):
        return len(self.known)

    @property
    def n(self):
        return len(self.novel)

    def __len__(self):
        return self.k + self.n

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def is_known(self, idx):
        return 0 <= idx < self.k

    def is_novel(self, idx):
        return self.k <= idx < len(self)

    def to_dict(self):
        return {"known": list(self.known), "novel": list(self.novel)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["known"]), tuple(d["novel"]))


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    payload_ref: str
    true_label: Optional[int] = None

    def to_dict(self):
        return {"id": self.sample_id, "payload": self.payload_ref, "label": self.true_label}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["id"]), str(d["payload"]), d.get("label"))


@dataclass(frozen=True)
class DatasetSplit:
    """D_L, D_U and D_test over a fixed label space.

    ``hidden_labels`` keeps the ground truth of unlabeled records. Training
    never reads it; it only feeds pseudo-label precision diagnostics.
    """

    labeled: tuple
    unlabeled: tuple
    test: tuple
    label_space: LabelSpace
    hidden_labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("labeled", "unlabeled", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self):
        return {
            "version": SPLIT_FORMAT_VERSION,
            "label_space": self.label_space.to_dict(),
            "labeled": [r.to_dict() for r in self.labeled],
            "unlabeled": [r.to_dict() for r in self.unlabeled],
            "test": [r.to_dict() for r in self.test],
            "hidden_labels": {k: self.hidden_labels[k] for k in sorted(self.hidden_labels)},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SPLIT_FORMAT_VERSION:
            raise ManifestError(f"unsupported split version {d.get('version')!r}")
        return cls(
            labeled=tuple(SampleRecord.from_dict(r) for r in d["labeled"]),
            unlabeled=tuple(SampleRecord.from_dict(r) for r in d["unlabeled"]),
            test=tuple(SampleRecord.from_dict(r) for r in d["test"]),
            label_space=LabelSpace.from_dict(d["label_space"]),
            hidden_labels={str(k): int(v) for k, v in d.get("hidden_labels", {}).items()},
        )

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    payload_ref: str
    split: Optional[str] = None  # "train" | "test" when the dataset predefines it


@dataclass(frozen=True)
class Manifest:
    classes: tuple
    samples: Mapping[str, tuple]

    @classmethod
    def from_dict(cls, d):
        if "classes" not in d or not isinstance(d["classes"], list):
            raise ManifestError("manifest must contain a 'classes' list")
        names, samples = [], {}
        for i, c in enumerate(d["classes"]):
            if "name" not in c:
                raise ManifestError(f"class entry {i} has no 'name'")
            entries = []
            for s in c.get("samples", []):
                tag = s.get("split")
                if tag not in (None, "train", "test"):
                    raise ManifestError(f"sample {s.get('id')!r}: unknown split tag {tag!r}")
                entries.append(ManifestEntry(str(s["id"]), str(s["payload"]), tag))
            names.append(c["name"])
            samples[c["name"]] = tuple(entries)
        if len(set(names)) != len(names):
            raise ManifestError("manifest lists a class name twice")
        return cls(tuple(names), samples)

    def to_dict(self):
        return {
            "classes": [
                {
                    "name": name,
                    "samples": [
                        {"id": e.sample_id, "payload": e.payload_ref}
                        | ({"split": e.split} if e.split else {})
                        for e in self.samples[name]
                    ],
                }
                for name in self.classes
            ]
        }

    @property
    def has_predefined_test(self):
        return any(e.split == "test" for es in self.samples.values() for e in es)


def load_manifest(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return Manifest.from_dict(data)


def _check_fraction(name, value, *, closed_low=False, closed_high=False):
    lo_ok = value >= 0 if closed_low else value > 0
    hi_ok = value <= 1 if closed_high else value < 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in {'[' if closed_low else '('}0, 1{']' if closed_high else ')'}, got {value}")


def build_split(manifest, ratio_labeled=0.5, known_fraction=0.5, test_fraction=None, seed=0):
    """Partition a manifest into labeled, unlabeled and test records.

    The first ``floor(known_fraction * C)`` classes in manifest order are
    known. For every known class, ``max(1, floor(ratio_labeled * m))`` of its
    ``m`` training samples are labeled; everything else goes to the
    unlabeled pool. Without a predefined test split, ``test_fraction`` draws
    ``round(test_fraction * class size)`` samples per class out of the
    unlabeled pool.
    """
    if isinstance(manifest, Mapping):
        manifest = Manifest.from_dict(manifest)
    _check_fraction("ratio_labeled", ratio_labeled)
    _check_fraction("known_fraction", known_fraction, closed_high=True)
    if test_fraction is not None:
        _check_fraction("test_fraction", test_fraction)
    if len(manifest.classes) < 2:
        raise ManifestError("manifest must list at least two classes")
    for name in manifest.classes:
        if len(manifest.samples[name]) == 0:
            raise ManifestError(f"class {name!r} has zero samples")
        if len(manifest.samples[name]) < 2:
            raise ManifestError(f"class {name!r} needs at least two samples")
    all_ids = [e.sample_id for es in manifest.samples.values() for e in es]
    if len(set(all_ids)) != len(all_ids):
        raise ManifestError("manifest sample ids are not unique")

    total = len(manifest.classes)
    k = math.floor(_exact(known_fraction) * total)
    if k == 0 or k == total:
        raise ManifestError(
            f"known_fraction={known_fraction} over {total} classes gives k={k}, n={total - k}"
        )
    space = LabelSpace(manifest.classes[:k], manifest.classes[k:])
    predefined = manifest.has_predefined_test

    labeled, unlabeled, test = [], [], []
    hidden = {}
    for idx, name in enumerate(manifest.classes):
        entries = manifest.samples[name]
        train = [e for e in entries if e.split != "test"]
        test.extend(SampleRecord(e.sample_id, e.payload_ref, idx) for e in entries if e.split == "test")

        chosen = set()
        if idx < k:
            n_lab = max(1, math.floor(_exact(ratio_labeled) * len(train)))
            order = rng_for(seed, f"split/labeled/{name}").permutation(len(train))
            chosen = {int(i) for i in order[:n_lab]}
        pool = []
        for i, e in enumerate(train):
            if i in chosen:
                labeled.append(SampleRecord(e.sample_id, e.payload_ref, idx))
            else:
                pool.append(e)

        if not predefined and test_fraction is not None:
            quota = min(len(pool), math.floor(_exact(test_fraction) * len(entries) + Fraction(1, 2)))
            order = rng_for(seed, f"split/test/{name}").permutation(len(pool))
            drawn = {int(i) for i in order[:quota]}
            test.extend(SampleRecord(e.sample_id, e.payload_ref, idx) for i, e in enumerate(pool) if i in drawn)
            pool = [e for i, e in enumerate(pool) if i not in drawn]

        for e in pool:
            unlabeled.append(SampleRecord(e.sample_id, e.payload_ref, None))
            hidden[e.sample_id] = idx

    return DatasetSplit(tuple(labeled), tuple(unlabeled), tuple(test), space, hidden)


def validate_split(split):
    """List every violated split invariant; an empty list means valid."""
    problems = []
    space = split.label_space
    size = len(space)
    for r in split.labeled:
        if r.true_label is None or not space.is_known(r.true_label):
            problems.append(f"labeled record {r.sample_id!r} has non-known label {r.true_label!r}")
    for r in split.test:
        if r.true_label is None or not 0 <= r.true_label < size:
            problems.append(f"test record {r.sample_id!r} has label {r.true_label!r} outside [0, {size})")
    for r in split.unlabeled:
        if r.true_label is not None and not 0 <= r.true_label < size:
            problems.append(f"unlabeled record {r.sample_id!r} has label {r.true_label!r} outside [0, {size})")

    seen = {}
    for part in ("labeled", "unlabeled", "test"):
        for r in getattr(split, part):
            if r.sample_id in seen:
                problems.append(
                    f"sample_id {r.sample_id!r} appears in both {seen[r.sample_id]} and {part}"
                    if seen[r.sample_id] != part
                    else f"sample_id {r.sample_id!r} duplicated within {part}"
                )
            else:
                seen[r.sample_id] = part
    return problems
