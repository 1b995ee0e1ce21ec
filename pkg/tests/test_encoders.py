import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from secos.datamodel import LabelSpace, SampleRecord
from secos.encoders import (
    PromptBank,
    SyntheticEncoder,
    SyntheticEncoderConfig,
    build_class_embeddings,
    confidence_matrix,
    ema_update,
    read_embedding_cache,
    synthetic_payload,
    synthetic_prompt_bank,
    write_embedding_cache,
)
from secos.exceptions import DegenerateEmbeddingError, DegenerateFeatureError, PayloadError, ShapeMismatchError


class TableEncoder:
    """Text encoder returning fixed vectors per prompt string."""

    def __init__(self, table):
        self.table = table

    def encode_text(self, texts):
        return np.array([self.table[t] for t in texts], dtype=np.float64)


SPACE = LabelSpace(("a",), ("b",))


class TestClassEmbeddings:
    def test_single_prompt(self):
        enc = TableEncoder({"pa": [3.0, 4.0], "pb": [0.0, 2.0]})
        e = build_class_embeddings(enc, {"a": ["pa"], "b": ["pb"]}, SPACE)
        assert np.allclose(e, [[0.6, 0.8], [0.0, 1.0]], atol=1e-15)

    def test_two_prompt_mean(self):
        rng = np.random.default_rng(0)
        e1, e2 = rng.standard_normal(5), rng.standard_normal(5)
        enc = TableEncoder({"x": e1, "y": e2, "z": e1})
        got = build_class_embeddings(enc, {"a": ["x", "y"], "b": ["z"]}, SPACE)[0]
        u1, u2 = e1 / np.linalg.norm(e1), e2 / np.linalg.norm(e2)
        want = (u1 + u2) / 2
        assert np.allclose(got, want / np.linalg.norm(want), atol=1e-12)

    def test_opposing_prompts(self):
        enc = TableEncoder({"p": [1.0, 0.0], "q": [-1.0, 0.0], "r": [0.0, 1.0]})
        with pytest.raises(DegenerateEmbeddingError, match="'a'"):
            build_class_embeddings(enc, {"a": ["p", "q"], "b": ["r"]}, SPACE)

    def test_missing_class(self):
        enc = TableEncoder({"p": [1.0, 0.0]})
        with pytest.raises(ValueError):
            build_class_embeddings(enc, {"a": ["p"]}, SPACE)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_prompt_order_invariance(self, seed, n_prompts):
        rng = np.random.default_rng(seed)
        prompts = [f"p{i}" for i in range(n_prompts)]
        enc = TableEncoder({p: rng.standard_normal(7) for p in prompts + ["b"]})
        perm = [prompts[i] for i in rng.permutation(n_prompts)]
        a = build_class_embeddings(enc, {"a": prompts, "b": ["b"]}, SPACE)
        b = build_class_embeddings(enc, {"a": perm, "b": ["b"]}, SPACE)
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_prompt_bank_file(self, tmp_path):
        bank = PromptBank.from_templates(["a", "b"], ("a photo of a {}.", "a {} again"))
        bank.save(tmp_path / "p.json")
        assert PromptBank.load(tmp_path / "p.json") == bank


class TestConfidence:
    def test_equidistant(self):
        e = np.eye(4)
        row = confidence_matrix(np.ones((1, 4)), e, 100.0)
        assert np.allclose(row, 0.25, atol=1e-15)

    def test_aligned(self):
        e = np.eye(5)
        row = confidence_matrix(e[:1] * 3.0, e, 100.0)[0]
        assert row[0] == pytest.approx(1.0, abs=1e-6)
        assert np.all(row[1:] < 1e-6)

    def test_zero_scale_uniform(self):
        rng = np.random.default_rng(1)
        conf = confidence_matrix(rng.standard_normal((3, 4)), np.eye(4), 0.0)
        assert np.allclose(conf, 0.25)

    def test_zero_feature(self):
        with pytest.raises(DegenerateFeatureError):
            confidence_matrix(np.zeros((1, 3)), np.eye(3))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            confidence_matrix(np.ones((1, 3)), np.eye(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_rows_and_rescaling(self, seed, factor):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((6, 5))
        e = rng.standard_normal((4, 5))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        a = confidence_matrix(f, e, 100.0)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)
        assert np.max(np.abs(a - confidence_matrix(f * factor, e, 100.0))) <= 1e-9


class TestEma:
    def test_decay_one_and_zero(self):
        t = {"w": torch.tensor([1.0, 2.0], dtype=torch.float64)}
        s = {"w": torch.tensor([5.0, 6.0], dtype=torch.float64)}
        ema_update(t, s, 1.0)
        assert t["w"].tolist() == [1.0, 2.0]
        ema_update(t, s, 0.0)
        assert t["w"].tolist() == [5.0, 6.0]

    def test_scalar(self):
        t = [np.array([1.0])]
        ema_update(t, [np.array([0.0])], 0.999)
        assert t[0][0] == pytest.approx(0.999, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ema_update([np.zeros(2)], [np.zeros(3)], 0.5)

    def test_decay_range(self):
        with pytest.raises(ValueError):
            ema_update([np.zeros(2)], [np.zeros(2)], 1.5)


def test_embedding_cache_bit_exact(tmp_path):
    m = np.random.default_rng(2).standard_normal((7, 5)).astype(np.float32)
    write_embedding_cache(tmp_path / "c.bin", m)
    back = read_embedding_cache(tmp_path / "c.bin")
    assert back.dtype == np.float32 and back.tobytes() == m.tobytes()
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"SECOSEMB" and len(raw) == 24 + 4 * 35
    (tmp_path / "t.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_embedding_cache(tmp_path / "t.bin")


class TestSyntheticEncoder:
    names = tuple(f"class_{i:02d}" for i in range(6))

    def encoder(self, **kw):
        return SyntheticEncoder(SyntheticEncoderConfig(dim=16, **kw), self.names)

    def records(self, n, cls=0):
        return [SampleRecord(f"r{i}", synthetic_payload(cls, i)) for i in range(n)]

    def test_prototypes_separated(self):
        p = SyntheticEncoder(SyntheticEncoderConfig(), tuple(f"c{i}" for i in range(10))).prototypes
        cos = p @ p.T
        assert np.allclose(np.diag(cos), 1.0)
        assert np.max(np.abs(cos - np.eye(10))) < 0.5

    def test_clean_view_repeatable(self):
        enc = self.encoder(instance_scale=0.0)
        recs = self.records(2)
        x = enc.inputs(recs, "none")
        assert np.array_equal(x[0, 0], enc.prototypes[0])
        assert np.array_equal(enc.encode_images(recs), enc.encode_images(recs))

    def test_same_seed_same_rows(self):
        enc = self.encoder()
        recs = self.records(3)
        assert np.array_equal(enc.inputs(recs, "strong", 5), enc.inputs(recs, "strong", 5))
        assert not np.array_equal(enc.inputs(recs, "strong", 5), enc.inputs(recs, "strong", 6))

    def test_view_distance_monte_carlo(self):
        enc = self.encoder()
        c = enc.config
        recs = self.records(2000)
        d2 = np.sum((enc.inputs(recs, "weak", 1) - enc.inputs(recs, "strong", 1)) ** 2, axis=(1, 2))
        want = c.dim * (c.sigma_weak ** 2 + c.sigma_strong ** 2)
        assert abs(d2.mean() - want) <= 0.1 * want

    def test_bad_payload(self):
        enc = self.encoder()
        with pytest.raises(PayloadError):
            enc.inputs([SampleRecord("x", "img/cat.png")])
        with pytest.raises(PayloadError):
            enc.inputs([SampleRecord("x", synthetic_payload(99, 0))])

    def test_text_embeddings_unit_and_distinct(self):
        enc = self.encoder()
        space = LabelSpace(self.names[:3], self.names[3:])
        e = build_class_embeddings(enc, synthetic_prompt_bank(self.names), space)
        assert np.allclose(np.linalg.norm(e, axis=1), 1.0)
        assert np.max(np.abs(e @ e.T - np.eye(6))) < 0.99

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SyntheticEncoderConfig(sigma_weak=0.3, sigma_strong=0.2)
        with pytest.raises(ValueError):
            SyntheticEncoderConfig(dim=1)
