"""Neural building blocks on top of the autodiff tensor core.

ParamStore owns every trainable array plus its Adam state; layers are thin
objects that declare their parameters against a store under a name prefix and
apply them functionally. Construction order is deterministic, so a fixed seed
gives bit-identical initializations.

Checkpoints are a single binary file: magic+version header, JSON config blob,
then length-prefixed named parameter records with raw little-endian float64
payloads. Loading verifies the name set and every shape in both directions.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Iterable

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

CKPT_MAGIC = b"QACCKPT"
CKPT_VERSION = 1


class ParamStore:
    """Named trainable parameters with gradients and Adam moments."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def param(self, name: str, shape: tuple, init: str) -> Tensor:
        """Create (or fetch) a parameter; init ∈ {glorot, embedding, zeros, ones}."""
        shape = tuple(shape)
        if name in self._params:
            p = self._params[name]
            if p.shape != shape:
                raise ShapeError(f"param {name}", p.shape, shape)
            return p
        if init == "glorot":
            fan_in, fan_out = shape[0], shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "embedding":
            data = self.rng.uniform(-0.05, 0.05, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True)
        self._params[name] = p
        self._m[name] = np.zeros(shape)
        self._v[name] = np.zeros(shape)
        return p

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def l2_norm_sq(self) -> float:
        return float(sum((p.data * p.data).sum() for p in self._params.values()))

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def adam_state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values; name sets and shapes must match exactly."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"checkpoint parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, arr in arrays.items():
            p = self._params[name]
            if p.shape != arr.shape:
                raise ShapeError(f"load {name}", p.shape, arr.shape)
            p.data = arr.astype(np.float64)
            self._m[name][:] = 0.0
            self._v[name][:] = 0.0
        self.step = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


@contextmanager
def no_grad(store: ParamStore):
    """Temporarily stop graph construction from this store's parameters."""
    params = store.tensors()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def save_checkpoint(path: str, store: ParamStore, config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        names = store.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            arr = store[name].data
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<B", f.read(1))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(blen).decode("utf-8"))
        (n,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            arrays[name] = arr.astype(np.float64)
    return config, arrays


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.param(f"{name}.w", (d_in, d_out), "glorot")
        self.b = store.param(f"{name}.b", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tz.matmul(x, self.w)
        if self.b is not None:
            out = tz.add(out, self.b)
        return out


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.param(f"{name}.gain", (dim,), "ones")
        self.bias = store.param(f"{name}.bias", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return tz.layer_norm(x, self.gain, self.bias)


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention; PAD keys get exactly zero weight."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", dim, dim)
        self.wv = Linear(store, f"{name}.v", dim, dim)
        self.wo = Linear(store, f"{name}.o", dim, dim)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        # (B, L, d) -> (B, A, L, dh)
        return tz.transpose(
            tz.reshape(x, (batch, length, self.heads, self.dh)), (0, 2, 1, 3)
        )

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch, length, _ = x.shape
        q = self._split(self.wq(x), batch, length)
        k = self._split(self.wk(x), batch, length)
        v = self._split(self.wv(x), batch, length)
        scores = tz.mul(
            tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))),
            Tensor(1.0 / np.sqrt(self.dh)),
        )
        key_mask = mask[:, None, None, :]  # broadcast over heads and query slots
        attn = tz.softmax_masked(scores, key_mask)
        ctx = tz.matmul(attn, v)  # (B, A, L, dh)
        merged = tz.reshape(tz.transpose(ctx, (0, 2, 1, 3)), (batch, length, self.dim))
        return self.wo(merged)


class TransformerBlock:
    """Post-norm block: attention -> add&norm -> pointwise FFN -> add&norm."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, ffn_mult: int = 4):
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", dim, heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.ff1 = Linear(store, f"{name}.ff1", dim, dim * ffn_mult)
        self.ff2 = Linear(store, f"{name}.ff2", dim * ffn_mult, dim)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = self.norm1(tz.add(x, self.attn(x, mask)))
        x = self.norm2(tz.add(x, self.ff2(tz.relu(self.ff1(x)))))
        return x


class TransformerEncoder:
    """Learned positional embeddings plus a stack of post-norm blocks.

    Input is an already-embedded sequence (B, L, dim) with a boolean validity
    mask (B, L). Output keeps the shape; PAD positions carry values but every
    attention row gives them zero weight, and callers must exclude them from
    pooling.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        dim: int,
        blocks: int,
        heads: int,
        max_len: int,
        ffn_mult: int = 4,
    ):
        self.pos = store.param(f"{name}.pos", (max_len, dim), "embedding")
        self.blocks = [
            TransformerBlock(store, f"{name}.block{i}", dim, heads, ffn_mult)
            for i in range(blocks)
        ]

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch, length, _ = x.shape
        if length > self.pos.shape[0]:
            raise ShapeError("positional", (length,), self.pos.shape)
        pos = tz.getitem(self.pos, np.arange(length))
        x = tz.add(x, tz.reshape(pos, (1, length, pos.shape[-1])))
        for block in self.blocks:
            x = block(x, mask)
        return x


class CharConvBank:
    """Per-width character convolutions with tanh and masked max-over-time.

    For width w over a length-l prefix the feature map has max(l-w+1, 1) valid
    windows; prefixes shorter than w see one window padded with PAD character
    embeddings. Returns one pooled feature vector per kernel width.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        char_dim: int,
        widths: tuple[int, ...],
        counts: tuple[int, ...],
    ):
        if len(widths) != len(counts):
            raise ValueError("widths and counts must align")
        self.widths = tuple(widths)
        self.char_dim = char_dim
        self.kernels = [
            store.param(f"{name}.w{w}.kernel", (w * char_dim, c), "glorot")
            for w, c in zip(widths, counts)
        ]
        self.biases = [
            store.param(f"{name}.w{w}.bias", (c,), "zeros") for w, c in zip(widths, counts)
        ]

    def __call__(self, emb: Tensor, lengths: np.ndarray) -> list[Tensor]:
        batch, maxlen, dc = emb.shape
        outs: list[Tensor] = []
        for w, kernel, bias in zip(self.widths, self.kernels, self.biases):
            n_windows = maxlen - w + 1
            if n_windows < 1:
                raise ShapeError("char_conv", (maxlen,), (w,))
            # stack w shifted views so each window is one row of size w*dc
            slices = [emb[:, j : j + n_windows, :] for j in range(w)]
            windows = tz.concat(slices, axis=-1)  # (B, n_windows, w*dc)
            feat = tz.tanh(tz.add(tz.matmul(windows, kernel), bias))
            valid = np.arange(n_windows)[None, :] < np.maximum(lengths - w + 1, 1)[:, None]
            outs.append(tz.masked_max(feat, valid[:, :, None], axis=1))
        return outs
