"""Frozen transformer backbone with parallel bottleneck adapters and a projector.

Each residual block computes::

    h      = f + Attention(f)
    f_next = h + MLP(h) + Adapter(h)
    Adapter(z) = scale * up(GeLU(down(LayerNorm(z))))

Only adapter and projector tensors are trainable. With the up projections
zero-initialised the network reproduces the frozen model exactly.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import NonFiniteError, ShapeMismatchError

CHECKPOINT_MAGIC = b"SECOSCKP"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


def _generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


class FrozenAttention(nn.Module):
    """Pre-norm multi-head self-attention with fixed random weights."""

    def __init__(self, d_model, n_heads=1, weight_scale=1.0, generator=None):
        super().__init__()
        if d_model % n_heads:
            raise ShapeMismatchError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(d_model, eps=LN_EPS)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        std = weight_scale / math.sqrt(d_model)
        with torch.no_grad():
            for lin in (self.qkv, self.out):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=generator) * std)
                lin.bias.zero_()

    def forward(self, f):
        b, t, d = f.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.norm(f)).split(d, dim=-1)
        q, k, v = (z.reshape(b, t, self.n_heads, hd).transpose(1, 2) for z in (q, k, v))
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, t, d))


class FrozenMLP(nn.Module):
    def __init__(self, d_model, hidden, weight_scale=1.0, generator=None):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, eps=LN_EPS)
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, d_model)
        self.act = nn.GELU()
        with torch.no_grad():
            self.fc1.weight.copy_(torch.randn(self.fc1.weight.shape, generator=generator) / math.sqrt(d_model))
            self.fc2.weight.copy_(
                torch.randn(self.fc2.weight.shape, generator=generator) * weight_scale / math.sqrt(hidden)
            )
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()

    def forward(self, h):
        return self.fc2(self.act(self.fc1(self.norm(h))))


class FrozenBlock(nn.Module):
    def __init__(self, attn, mlp):
        super().__init__()
        self.attn = attn
        self.mlp = mlp


class FrozenBackbone(nn.Module):
    """Input embedding followed by ``depth`` attention/MLP residual blocks.

    The pooled output is the first token of the final states. All
    parameters have ``requires_grad=False``.
    """

    def __init__(self, d_in, d_model, depth=2, n_heads=1, mlp_hidden=None,
                 residual_scale=0.5, embed_bias_scale=0.0, seed=0):
        super().__init__()
        g = _generator(seed)
        self.d_in = d_in
        self.d_model = d_model
        self.embed = nn.Linear(d_in, d_model)
        with torch.no_grad():
            q, _ = torch.linalg.qr(torch.randn(max(d_in, d_model), max(d_in, d_model), generator=g))
            self.embed.weight.copy_(q[:d_model, :d_in])
            bias = torch.randn(d_model, generator=g)
            self.embed.bias.copy_(bias / bias.norm() * embed_bias_scale)
        hidden = mlp_hidden or 2 * d_model
        self.blocks = nn.ModuleList(
            FrozenBlock(
                FrozenAttention(d_model, n_heads, residual_scale, g),
                FrozenMLP(d_model, hidden, residual_scale, g),
            )
            for _ in range(depth)
        )
        self.requires_grad_(False)

    @property
    def depth(self):
        return len(self.blocks)

    def embed_tokens(self, x):
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] != self.d_in:
            raise ShapeMismatchError(f"expected input width {self.d_in}, got {x.shape[-1]}")
        return self.embed(x)

    def forward_tokens(self, x):
        f = self.embed_tokens(x)
        for block in self.blocks:
            h = f + block.attn(f)
            f = h + block.mlp(h)
        return f

    def forward(self, x):
        return self.forward_tokens(x)[:, 0]

    def checksum(self):
        return tensor_checksum(self.state_dict())


class Adapter(nn.Module):
    def __init__(self, d_model, rank=10, scale=1.0, learnable_scale=False, generator=None):
        super().__init__()
        if rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {rank}")
        self.norm = nn.LayerNorm(d_model, eps=LN_EPS)
        self.down = nn.Linear(d_model, rank)
        self.up = nn.Linear(rank, d_model)
        self.act = nn.GELU()
        with torch.no_grad():
            self.down.weight.copy_(torch.randn(self.down.weight.shape, generator=generator) / math.sqrt(d_model))
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()
        scale = torch.tensor(float(scale))
        if learnable_scale:
            self.scale = nn.Parameter(scale)
        else:
            self.register_buffer("scale", scale)

    def forward(self, z):
        return self.scale * self.up(self.act(self.down(self.norm(z))))


def adapter_forward(z, adapter):
    """Apply one adapter to a vector or token batch, rejecting non-finite input."""
    if not torch.isfinite(z).all():
        raise NonFiniteError("adapter input contains NaN or inf")
    return adapter(z)


def block_forward(f, block, adapter=None):
    if f.shape[-1] != block.attn.norm.normalized_shape[0]:
        raise ShapeMismatchError(
            f"token width {f.shape[-1]} does not match block width {block.attn.norm.normalized_shape[0]}"
        )
    h = f + block.attn(f)
    out = h + block.mlp(h)
    if adapter is not None:
        out = out + adapter(h)
    return out


class AdapterNetwork(nn.Module):
    """Frozen backbone + one adapter per block + trainable projector."""

    def __init__(self, backbone, d_text, rank=10, adapter_scale=1.0, learnable_scale=False,
                 projection=None, seed=0):
        super().__init__()
        self.backbone = backbone
        d_model = backbone.d_model
        dtype = backbone.embed.weight.dtype
        g = _generator(seed)
        self.adapters = nn.ModuleList(
            Adapter(d_model, rank, adapter_scale, learnable_scale, g) for _ in range(backbone.depth)
        ).to(dtype)
        # built directly in the backbone's precision so a copied projection is not rounded
        self.projector = nn.Linear(d_model, d_text, dtype=dtype)
        with torch.no_grad():
            if projection is not None:
                w = torch.as_tensor(np.asarray(projection), dtype=self.projector.weight.dtype)
                if w.shape != (d_text, d_model):
                    raise ShapeMismatchError(f"projection shape {tuple(w.shape)} != {(d_text, d_model)}")
                self.projector.weight.copy_(w)
            else:
                q, _ = torch.linalg.qr(torch.randn(max(d_text, d_model), max(d_text, d_model), generator=g))
                self.projector.weight.copy_(q[:d_text, :d_model])
            self.projector.bias.zero_()
        self.backbone.requires_grad_(False)

    @property
    def rank(self):
        return self.adapters[0].down.out_features if len(self.adapters) else 0

    @property
    def d_text(self):
        return self.projector.out_features

    def tokens(self, x):
        f = self.backbone.embed_tokens(x)
        for block, adapter in zip(self.backbone.blocks, self.adapters):
            f = block_forward(f, block, adapter)
        return f

    def forward(self, x):
        """Unnormalised visual features V_x."""
        return self.projector(self.tokens(x)[:, 0])

    def features(self, x):
        return F.normalize(self.forward(x), dim=-1)

    def logits(self, x, class_embeds, scale):
        return scale * self.features(x) @ class_embeds.T

    def named_trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def trainable_state(self):
        return {n: p for n, p in self.named_trainable()}


def frozen_reference_features(backbone, projection, x):
    """Features of the frozen model alone: projection(backbone(x)), L2-normalised."""
    w = torch.as_tensor(np.asarray(projection), dtype=next(backbone.parameters()).dtype)
    return F.normalize(backbone(x) @ w.T, dim=-1)


def classification_loss(v, class_embeds, y, scale):
    """Cross-entropy over scale-weighted cosine logits, averaged over the batch.

    The printed objective ``-sum_i 1[i=y] log(exp(eps) * <V, E_i>)`` has no
    normaliser and can go negative; this is the softmax form CLIP trains with.
    """
    v = torch.as_tensor(v)
    class_embeds = torch.as_tensor(class_embeds, dtype=v.dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    single = v.dim() == 1
    if single:
        v, y = v.unsqueeze(0), y.reshape(1)
    n_classes = class_embeds.shape[0]
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): {y.tolist()}")
    logits = scale * F.normalize(v, dim=-1) @ F.normalize(class_embeds, dim=-1).T
    return F.cross_entropy(logits, y)


def multiview_loss(model, views, y, class_embeds, scale, sample_ids=None):
    """Sum over views of the batch-mean classification loss."""
    total = 0.0
    for x in views:
        per_sample = F.cross_entropy(model.logits(x, class_embeds, scale), y, reduction="none")
        if not torch.isfinite(per_sample).all():
            bad = int((~torch.isfinite(per_sample)).nonzero()[0, 0])
            sid = sample_ids[bad] if sample_ids is not None else bad
            raise NonFiniteError(f"non-finite loss for sample {sid!r}", sample_id=sid)
        total = total + per_sample.mean()
    return total


def loss_gradients(model, views, y, class_embeds, scale, sample_ids=None):
    """Gradients of the multi-view loss w.r.t. trainable tensors only."""
    named = model.named_trainable()
    loss = multiview_loss(model, views, y, class_embeds, scale, sample_ids)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return loss.detach(), {
        n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)
    }


def tensor_checksum(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def checkpoint_bytes(model):
    """Deterministic little-endian float32 dump of the trainable tensors."""
    buf = io.BytesIO()
    named = model.named_trainable()
    d_model = model.backbone.d_model
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<6I", CHECKPOINT_VERSION, model.backbone.depth, d_model,
                          model.rank, model.d_text, len(named)))
    for name, p in named:
        raw = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_checkpoint(data):
    """Parse checkpoint bytes into (header dict, ordered {name: float32 array})."""
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, depth, d_model, rank, d_text, count = struct.unpack_from("<6I", view, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8 + 24
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + ln]).decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    header = {"version": version, "depth": depth, "d_model": d_model, "rank": rank, "d_text": d_text}
    return header, tensors


def load_checkpoint(model, source):
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as fh:
            source = fh.read()
    header, tensors = read_checkpoint(bytes(source))
    expected = (model.backbone.depth, model.backbone.d_model, model.rank, model.d_text)
    got = (header["depth"], header["d_model"], header["rank"], header["d_text"])
    if expected != got:
        raise ShapeMismatchError(f"checkpoint dims {got} do not match model {expected}")
    state = model.trainable_state()
    if list(state) != list(tensors):
        raise ShapeMismatchError("checkpoint tensor names do not match model")
    with torch.no_grad():
        for name, p in state.items():
            p.copy_(torch.from_numpy(tensors[name]).to(p.dtype))
    return model
