"""Vision-language encoder interface and a seeded synthetic backend.

Any object exposing ``encode_text(list[str]) -> (m, d_text)`` and
``encode_images(records, view, seed) -> (B, d_text)`` can act as a frozen
teacher. The synthetic backend additionally exposes the raw backbone inputs
and its frozen backbone so the adapter network can be trained on top of it.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch

from ._seeding import rng_for, sub_seed
from .adapter_net import FrozenBackbone, frozen_reference_features
from .exceptions import (
    DegenerateEmbeddingError,
    DegenerateFeatureError,
    PayloadError,
    ShapeMismatchError,
)

VIEWS = ("none", "weak", "strong")
CACHE_MAGIC = b"SECOSEMB"
CACHE_VERSION = 1
_FLOAT32 = 1


class VisionLanguageEncoder(Protocol):
    def encode_text(self, texts: Sequence[str]) -> np.ndarray: ...

    def encode_images(self, records, view: str = "none", seed: int = 0) -> np.ndarray: ...


class PromptBank(dict):
    """Mapping class name -> list of descriptive prompts."""

    def validate(self, label_space):
        missing = [c for c in label_space.names if not self.get(c)]
        if missing:
            raise ValueError(f"prompt bank has no prompts for classes: {missing}")
        for name, prompts in self.items():
            for p in prompts:
                if not isinstance(p, str) or not p.strip():
                    raise ValueError(f"empty prompt for class {name!r}")
        return self

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls({str(k): [str(p) for p in v] for k, v in data.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(dict(self), indent=1) + "\n")

    @classmethod
    def from_templates(cls, class_names, templates=("a photo of a {}.",)):
        return cls({c: [t.format(c) for t in templates] for c in class_names})


def _normalize_rows(a, *, what="row", names=None, error=DegenerateFeatureError):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.ravel() < 1e-8) if error is DegenerateEmbeddingError else np.flatnonzero(norms.ravel() == 0)
    if bad.size:
        i = int(bad[0])
        if error is DegenerateEmbeddingError:
            raise DegenerateEmbeddingError(names[i] if names else i, float(norms.ravel()[i]))
        raise DegenerateFeatureError(f"{what} {i} has zero norm")
    return a / norms


def build_class_embeddings(encoder, prompt_bank, label_space):
    """One unit vector per class: mean of normalised prompt embeddings, renormalised."""
    prompt_bank = PromptBank(prompt_bank).validate(label_space)
    means = []
    for name in label_space.names:
        emb = np.asarray(encoder.encode_text(prompt_bank[name]), dtype=np.float64)
        emb = _normalize_rows(emb, what=f"prompt of {name!r}")
        means.append(emb.mean(axis=0))
    return _normalize_rows(np.stack(means), names=list(label_space.names), error=DegenerateEmbeddingError)


def check_class_embeddings(embeds, n_classes=None, atol=1e-6):
    embeds = np.asarray(embeds, dtype=np.float64)
    if embeds.ndim != 2:
        raise ShapeMismatchError(f"class embeddings must be 2-D, got shape {embeds.shape}")
    if n_classes is not None and embeds.shape[0] != n_classes:
        raise ShapeMismatchError(f"expected {n_classes} class embeddings, got {embeds.shape[0]}")
    norms = np.linalg.norm(embeds, axis=1)
    if np.any(np.abs(norms - 1) > atol):
        raise ValueError("class embeddings must have unit L2 norm")
    return embeds


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def confidence_matrix(features, class_embeds, scale=100.0):
    """Row-wise softmax of ``scale * cos(feature, class embedding)``."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    class_embeds = np.asarray(class_embeds, dtype=np.float64)
    if features.shape[1] != class_embeds.shape[1]:
        raise ShapeMismatchError(
            f"feature dim {features.shape[1]} != embedding dim {class_embeds.shape[1]}"
        )
    if scale < 0:
        raise ValueError(f"logit scale must be non-negative, got {scale}")
    v = _normalize_rows(features, what="feature row")
    e = class_embeds / np.linalg.norm(class_embeds, axis=1, keepdims=True)
    return softmax(scale * (v @ e.T))


def check_confidence_matrix(conf, atol=1e-6):
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[1] < 1:
        raise ShapeMismatchError(f"confidence matrix must be 2-D, got shape {conf.shape}")
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise ValueError("confidence entries must lie in [0, 1]")
    if conf.shape[0] and np.max(np.abs(conf.sum(axis=1) - 1)) > atol:
        raise ValueError("confidence rows must sum to 1")
    return conf


def ema_update(teacher_params, student_params, decay):
    """In-place ``p_T <- decay * p_T + (1 - decay) * p_S`` over matching tensors.

    Accepts mappings of name -> tensor/array or plain sequences of them.
    Returns the (mutated) teacher parameters.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    if isinstance(teacher_params, Mapping):
        if list(teacher_params) != list(student_params):
            raise ShapeMismatchError("teacher and student parameter names differ")
        pairs = [(teacher_params[k], student_params[k]) for k in teacher_params]
    else:
        teacher_params, student_params = list(teacher_params), list(student_params)
        if len(teacher_params) != len(student_params):
            raise ShapeMismatchError("teacher and student have different parameter counts")
        pairs = list(zip(teacher_params, student_params))
    for t, s in pairs:
        if tuple(t.shape) != tuple(s.shape):
            raise ShapeMismatchError(f"parameter shape {tuple(t.shape)} != {tuple(s.shape)}")
    for t, s in pairs:
        if isinstance(t, torch.Tensor):
            with torch.no_grad():
                t.mul_(decay).add_(s.detach().to(t.dtype), alpha=1.0 - decay)
        else:
            t *= decay
            t += (1.0 - decay) * np.asarray(s)
    return teacher_params


def write_embedding_cache(path, matrix):
    """Header (magic, version, rows, dim, dtype code) then row-major float32 rows."""
    m = np.ascontiguousarray(np.asarray(matrix), dtype="<f4")
    if m.ndim != 2:
        raise ShapeMismatchError("embedding cache stores a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<4I", CACHE_VERSION, m.shape[0], m.shape[1], _FLOAT32))
        fh.write(m.tobytes())


def read_embedding_cache(path):
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not an embedding cache")
    version, rows, dim, code = struct.unpack_from("<4I", data, 8)
    if version != CACHE_VERSION or code != _FLOAT32:
        raise ValueError(f"{path}: unsupported cache version {version} / element type {code}")
    expected = 24 + 4 * rows * dim
    if len(data) != expected:
        raise ValueError(f"{path}: truncated cache ({len(data)} bytes, expected {expected})")
    return np.frombuffer(data, dtype="<f4", offset=24).reshape(rows, dim).copy()


@dataclass(frozen=True)
class SyntheticEncoderConfig:
    """Desk-scale stand-in for a pre-trained vision-language model.

    Inputs are ``prototype[c] + instance noise (+ view noise)``. The frozen
    backbone adds a shared offset to every input so that all image features
    share a common direction, as real CLIP features do. Text embeddings are
    the clean class features plus a class-level misalignment and per-prompt
    noise, which keeps zero-shot accuracy well below 100%.
    """

    dim: int = 64
    text_dim: int | None = None
    n_tokens: int = 1
    depth: int = 2
    n_heads: int = 1
    mlp_hidden: int | None = None
    residual_scale: float = 0.3
    shared_scale: float = 1.5
    sigma_weak: float = 0.05
    sigma_strong: float = 0.20
    instance_scale: float = 0.05
    text_bias: float = 1.0
    text_noise: float = 0.3
    max_cosine: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("synthetic feature dim must be >= 2")
        if not 0 <= self.sigma_weak < self.sigma_strong:
            raise ValueError("need 0 <= sigma_weak < sigma_strong")

    @property
    def d_text(self):
        return self.text_dim or self.dim

    def to_dict(self):
        return asdict(self)


_SYN_RE = re.compile(r"^syn:(\d+):(\d+)$")


def synthetic_payload(class_index, instance):
    return f"syn:{int(class_index)}:{int(instance)}"


def _unit_prototypes(n, dim, max_cosine, rng, max_tries=10_000):
    protos = []
    tries = 0
    while len(protos) < n:
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        tries += 1
        if all(abs(float(v @ p)) < max_cosine for p in protos):
            protos.append(v)
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} prototypes in {dim}-D with |cos| < {max_cosine}")
    return np.stack(protos)


class SyntheticEncoder:
    """Seeded synthetic vision-language encoder.

    Payload locators have the form ``syn:<class index>:<instance>``.
    """

    def __init__(self, config, class_names, dtype=torch.float64):
        self.config = config
        self.class_names = tuple(class_names)
        self.dtype = dtype
        c = config
        self.prototypes = _unit_prototypes(len(self.class_names), c.dim, c.max_cosine,
                                           rng_for(c.seed, "encoder/prototypes"))
        self.backbone = FrozenBackbone(
            c.dim, c.dim, depth=c.depth, n_heads=c.n_heads, mlp_hidden=c.mlp_hidden,
            residual_scale=c.residual_scale, embed_bias_scale=c.shared_scale,
            seed=sub_seed(c.seed, "encoder/backbone"),
        ).to(dtype)
        q, _ = np.linalg.qr(rng_for(c.seed, "encoder/projection").standard_normal((max(c.dim, c.d_text),) * 2))
        self.projection = q[: c.d_text, : c.dim].copy()
        self._class_features = None
        self._bias = rng_for(c.seed, "encoder/text-bias").standard_normal((len(self.class_names), c.d_text))
        self._bias /= np.linalg.norm(self._bias, axis=1, keepdims=True)

    # -- images ---------------------------------------------------------
    def payload_class(self, payload_ref):
        m = _SYN_RE.match(payload_ref)
        if not m:
            raise PayloadError(f"unknown payload locator {payload_ref!r}")
        cls = int(m.group(1))
        if cls >= len(self.class_names):
            raise PayloadError(f"payload {payload_ref!r} names class {cls} outside the encoder's {len(self.class_names)}")
        return cls

    def _clean_input(self, record):
        cls = self.payload_class(record.payload_ref)
        c = self.config
        rng = rng_for(c.seed, f"encoder/instance/{record.payload_ref}")
        return self.prototypes[cls] + c.instance_scale * rng.standard_normal((c.n_tokens, c.dim))

    def view_sigma(self, view):
        if view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
        return {"none": 0.0, "weak": self.config.sigma_weak, "strong": self.config.sigma_strong}[view]

    def inputs(self, records, view="none", seed=0):
        """Raw backbone inputs, shape (B, n_tokens, dim)."""
        if len(records) == 0:
            raise ValueError("no records to encode")
        sigma = self.view_sigma(view)
        out = np.stack([self._clean_input(r) for r in records])
        if sigma > 0:
            for i, r in enumerate(records):
                rng = rng_for(seed, f"encoder/view/{view}/{r.sample_id}")
                out[i] += sigma * rng.standard_normal(out[i].shape)
        return out

    def augment(self, x, view, rng):
        """Array-level augmentation used inside the training loop."""
        sigma = self.view_sigma(view)
        if sigma == 0:
            return x
        return x + sigma * rng.standard_normal(x.shape)

    def reference_features(self, x):
        with torch.no_grad():
            t = torch.as_tensor(np.asarray(x), dtype=self.dtype)
            return frozen_reference_features(self.backbone, self.projection, t).numpy()

    def encode_images(self, records, view="none", seed=0):
        return self.reference_features(self.inputs(records, view, seed))

    # -- text -----------------------------------------------------------
    def _class_of_text(self, text):
        best = None
        for i, name in enumerate(self.class_names):
            if re.search(rf"(?<![\w]){re.escape(name)}(?![\w])", text):
                if best is None or len(name) > len(self.class_names[best]):
                    best = i
        return best

    def encode_text(self, texts):
        c = self.config
        if self._class_features is None:
            clean = np.repeat(self.prototypes[:, None, :], c.n_tokens, axis=1)
            self._class_features = self.reference_features(clean)
        rows = []
        for text in texts:
            noise = rng_for(c.seed, f"encoder/text/{text}").standard_normal(c.d_text)
            noise /= np.linalg.norm(noise)
            cls = self._class_of_text(text)
            if cls is None:
                rows.append(noise)
            else:
                rows.append(self._class_features[cls] + c.text_bias * self._bias[cls] + c.text_noise * noise)
        return np.stack(rows)


def make_synthetic_manifest(n_classes=10, samples_per_class=200, test_per_class=0, class_prefix="class"):
    """Manifest dict for the synthetic benchmark, classes named ``class_00`` ...

    With ``test_per_class > 0`` every class gets that many extra samples
    tagged as a predefined test split.
    """
    width = max(2, len(str(n_classes - 1)))
    names = [f"{class_prefix}_{i:0{width}d}" for i in range(n_classes)]

    def sample(i, name, j):
        s = {"id": f"{name}/{j:05d}", "payload": synthetic_payload(i, j)}
        if test_per_class:
            s["split"] = "test" if j >= samples_per_class else "train"
        return s

    return {
        "classes": [
            {"name": name, "samples": [sample(i, name, j) for j in range(samples_per_class + test_per_class)]}
            for i, name in enumerate(names)
        ]
    }


def synthetic_prompt_bank(class_names, n_prompts=3):
    templates = [
        "a photo of a {}.",
        "a blurry photo of a {}.",
        "a close-up photo of the {}.",
        "a cropped photo of a {}.",
        "a bright photo of a {}.",
    ]
    return PromptBank({c: [t.format(c) for t in templates[:n_prompts]] for c in class_names})
