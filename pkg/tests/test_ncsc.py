import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secos.datamodel import DatasetSplit, LabelSpace, SampleRecord
from secos.encoders import softmax
from secos.ncsc import (
    assign_hard_pseudo_labels,
    build_dn,
    export_dn,
    group_by_class,
    load_dn,
    select_top_phi,
    top_phi_count,
)

from oracles import naive_dn


def make_split(n_unlabeled, k, n, n_labeled=0):
    space = LabelSpace(tuple(f"k{i}" for i in range(k)), tuple(f"n{i}" for i in range(n)))
    lab = [SampleRecord(f"l{i}", "p", i % k) for i in range(n_labeled)]
    unl = [SampleRecord(f"u{i:05d}", "p") for i in range(n_unlabeled)]
    return DatasetSplit(lab, unl, [], space)


def test_hard_labels():
    (a, b) = assign_hard_pseudo_labels(np.array([[0.2, 0.7, 0.1], [0.5, 0.5, 0.0]]), ["a", "b"])
    assert (a.label, a.confidence) == (1, 0.7)
    assert (b.label, b.confidence) == (0, 0.5)


def test_hard_labels_match_row_scan():
    rng = np.random.default_rng(0)
    conf = softmax(rng.standard_normal((100, 7)))
    for row, h in zip(conf, assign_hard_pseudo_labels(conf)):
        best = 0
        for c in range(7):
            if row[c] > row[best]:
                best = c
        assert h.label == best


class TestGroups:
    def test_all_in_class_zero(self):
        conf = np.tile([0.9, 0.05, 0.05], (5, 1))
        groups = group_by_class(assign_hard_pseudo_labels(conf), 3)
        assert [g.size for g in groups] == [5, 0, 0]

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        conf = softmax(3 * rng.standard_normal((40, 5)))
        ids = [f"s{i:02d}" for i in range(40)]
        perm = rng.permutation(40)
        a = group_by_class(assign_hard_pseudo_labels(conf, ids), 5)
        b = group_by_class(assign_hard_pseudo_labels(conf[perm], [ids[i] for i in perm]), 5)
        assert a == b
        assert sum(g.size for g in a) == 40

    def test_tie_break_by_id(self):
        conf = np.array([[0.2, 0.8]] * 3)
        (_, g) = group_by_class(assign_hard_pseudo_labels(conf, ["c", "a", "b"]), 2)
        assert [m[0] for m in g.members] == ["a", "b", "c"]


class TestTopPhi:
    @pytest.mark.parametrize("size,phi,want", [(10, 50, 5), (1, 50, 1), (7, 100, 7), (0, 50, 0), (3, 10, 1), (9, 50, 5)])
    def test_counts(self, size, phi, want):
        assert top_phi_count(size, phi) == want

    @pytest.mark.parametrize("phi", [0, -5, 101])
    def test_range(self, phi):
        with pytest.raises(ValueError):
            top_phi_count(3, phi)

    def test_highest_first(self):
        conf = np.array([[0.1, 0.9], [0.3, 0.7], [0.2, 0.8], [0.4, 0.6]])
        (_, g) = group_by_class(assign_hard_pseudo_labels(conf, list("abcd")), 2)
        assert [m[0] for m in select_top_phi(g, 50)] == ["a", "c"]


class TestBuildDN:
    def test_group_sizes_4_6_8(self):
        k, n = 1, 3
        rows = []
        for c, size in zip((1, 2, 3), (4, 6, 8)):
            for j in range(size):
                r = np.full(4, 0.1)
                r[c] = 0.7 - 0.01 * j
                rows.append(r / r.sum())
        conf = np.array(rows)
        dn = build_dn(make_split(len(rows), k, n), conf, 50)
        counts = [sum(1 for e in dn if e.label == c) for c in (1, 2, 3)]
        assert counts == [2, 3, 4]
        assert dn.origin == "global"

    def test_no_novel_argmax_warns(self):
        conf = np.tile([0.8, 0.1, 0.1], (6, 1))
        dn = build_dn(make_split(6, 1, 2), conf, 50)
        assert len(dn) == 0 and dn.diagnostics["warnings"]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_dn(make_split(3, 1, 1), np.full((4, 2), 0.5), 50)

    def test_balanced_size_near_labeled(self):
        # a perfectly separated balanced split: each class has the same member count
        k = n = 5
        per = 20
        rows, truth = [], []
        for c in range(k + n):
            m = per // 2 if c < k else per
            for _ in range(m):
                r = np.full(k + n, 0.01)
                r[c] = 0.91
                rows.append(r)
        split = make_split(len(rows), k, n, n_labeled=k * per // 2)
        dn = build_dn(split, np.array(rows), 50)
        assert abs(len(dn) - len(split.labeled)) <= k + n

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m, c = int(rng.integers(1, 300)), int(rng.integers(2, 21))
            k = int(rng.integers(1, c))
            conf = softmax(rng.uniform(0.5, 6) * rng.standard_normal((m, c)))
            phi = float(rng.choice([10, 25, 33.3, 50, 75, 90, 100]))
            split = make_split(m, k, c - k)
            ids = [r.sample_id for r in split.unlabeled]
            got = [(e.sample_id, e.label) for e in build_dn(split, conf, phi)]
            assert got == naive_dn(conf, ids, k, phi)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.integers(2, 12))
    def test_properties(self, seed, m, c):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, c))
        conf = softmax(rng.uniform(0.5, 6) * rng.standard_normal((m, c)))
        split = make_split(m, k, c - k)
        hard = {h.sample_id: h for h in assign_hard_pseudo_labels(conf, [r.sample_id for r in split.unlabeled])}
        sets = [build_dn(split, conf, phi) for phi in (10, 25, 50, 75, 90)]
        for small, big in zip(sets, sets[1:]):
            assert set(small.sample_ids) <= set(big.sample_ids)
        dn = sets[2]
        assert all(e.label >= k for e in dn)
        chosen = set(dn.sample_ids)
        for e in dn:
            excluded = [h.confidence for h in hard.values() if h.label == e.label and h.sample_id not in chosen]
            assert all(e.confidence >= x for x in excluded)


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    split = make_split(50, 2, 3)
    dn = build_dn(split, softmax(4 * rng.standard_normal((50, 5))), 50)
    export_dn(dn, split.label_space, tmp_path / "dn.tsv")
    back = load_dn(tmp_path / "dn.tsv", split.label_space)
    assert list(back) == list(dn)
