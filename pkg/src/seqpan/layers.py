"""Neural building blocks on top of :mod:`seqpan.autograd`.

Activations use a feature-major batched layout ``(B, d, L)``: one column
per sequence position. Masks are boolean ``(B, L)`` arrays with True on
valid positions.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = b"SQPN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Parameter container with recursive, de-duplicated parameter listing."""

    training: bool = True

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val.named_parameters(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if id(item) in seen:
                        continue
                    if isinstance(item, Tensor) and item.requires_grad:
                        seen.add(id(item))
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        seen.add(id(item))
                        yield from item.named_parameters(f"{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Single-layer FFN: ``W @ x + b`` applied to each column."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = _param(xavier_uniform(rng, (d_out, d_in), d_in, d_out, dtype))
        self.bias = _param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.affine(x, self.weight, self.bias)


class EmbeddingTable(Module):
    """Learned ``d x size`` table; column i is the embedding of index i."""

    def __init__(self, d: int, size: int, rng: np.random.Generator, dtype=np.float64):
        self.table = _param(rng.normal(0.0, 0.02, size=(d, size)).astype(dtype))

    @property
    def size(self) -> int:
        return self.table.shape[1]

    def lookup(self, ids) -> Tensor:
        return self.table[:, np.asarray(ids)]


class PositionalEmbedding(EmbeddingTable):
    def __call__(self, x: Tensor) -> Tensor:
        L = x.shape[-1]
        if L > self.size:
            raise ValueError(f"sequence length {L} exceeds positional table size {self.size}")
        return x + self.table[:, :L]


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-6):
        self.gain = _param(np.ones(d, dtype=dtype))
        self.bias = _param(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, axis=-2, eps=self.eps)


def _keep(mask) -> np.ndarray:
    """(B, L) validity mask -> (B, 1, L) for feature-major activations."""
    return np.asarray(mask, dtype=bool)[:, None, :]


class ConvBlock(Module):
    """Stacked ``conv1d -> relu``, residual, layer norm; padded columns zeroed after each layer."""

    def __init__(self, d: int, rng: np.random.Generator, kernel: int = 7, depth: int = 2, dtype=np.float64):
        if kernel % 2 == 0:
            raise ValueError(f"conv kernel size must be odd, got {kernel}")
        fan = d * kernel
        self.kernels = [_param(xavier_uniform(rng, (d, d, kernel), fan, fan, dtype)) for _ in range(depth)]
        self.biases = [_param(np.zeros(d, dtype=dtype)) for _ in range(depth)]
        self.norms = [LayerNorm(d, dtype) for _ in range(depth)]

    def __call__(self, x: Tensor, mask) -> Tensor:
        keep = _keep(mask)
        for k, b, norm in zip(self.kernels, self.biases, self.norms):
            x = norm(x + ag.relu(ag.conv1d(x, k, b)))
            x = ag.mask_fill(x, keep)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads over masked keys."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0, dtype=np.float64):
        if d % heads:
            raise ValueError(f"hidden size {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q_proj = Linear(d, d, rng, dtype=dtype)
        # a key bias only shifts each score row by a constant, which softmax ignores
        self.k_proj = Linear(d, d, rng, bias=False, dtype=dtype)
        self.v_proj = Linear(d, d, rng, dtype=dtype)
        self.out_proj = Linear(d, d, rng, dtype=dtype)
        self.dropout = dropout
        self.last_weights: np.ndarray | None = None

    def __call__(self, q_src: Tensor, kv_src: Tensor, kv_mask, rng: np.random.Generator | None = None) -> Tensor:
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if not kv_mask.any(axis=-1).all():
            raise ValueError("attention row has no valid key position")
        B, d, Lq = q_src.shape
        Lk = kv_src.shape[-1]
        h, dh = self.heads, self.d // self.heads
        q = self.q_proj(q_src).reshape(B, h, dh, Lq)
        k = self.k_proj(kv_src).reshape(B, h, dh, Lk)
        v = self.v_proj(kv_src).reshape(B, h, dh, Lk)
        scores = ag.scale(ag.transpose(q) @ k, 1.0 / np.sqrt(dh))  # (B, h, Lq, Lk)
        scores = ag.mask_fill(scores, kv_mask[:, None, None, :], ag.MASK_VALUE)
        weights = ag.softmax(scores, axis=-1)
        self.last_weights = weights.data
        weights = ag.dropout(weights, self.dropout, rng, self.training)
        ctx = v @ ag.transpose(weights)  # (B, h, dh, Lq)
        return self.out_proj(ctx.reshape(B, d, Lq))


class FeedForward(Module):
    """Position-wise two-layer FFN used inside standard transformer blocks."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64):
        self.inner = Linear(d, d, rng, dtype=dtype)
        self.outer = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ag.relu(self.inner(x)))


class TransformerBlock(Module):
    """Post-norm transformer block: attention sublayer then FFN sublayer.

    With ``cross=True`` the attention reads keys/values from a second
    sequence (the co-attention block); otherwise it is self-attention.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 attn_dropout: float = 0.0, dtype=np.float64):
        self.attn = MultiHeadAttention(d, heads, rng, attn_dropout, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.dropout = dropout

    def attend(self, x: Tensor, mask, kv: Tensor | None = None, kv_mask=None, rng=None) -> Tensor:
        kv, kv_mask = (x, mask) if kv is None else (kv, kv_mask)
        a = ag.dropout(self.attn(x, kv, kv_mask, rng), self.dropout, rng, self.training)
        return ag.mask_fill(self.norm1(x + a), _keep(mask))

    def __call__(self, x: Tensor, mask, kv: Tensor | None = None, kv_mask=None, rng=None) -> Tensor:
        y = self.attend(x, mask, kv, kv_mask, rng)
        f = ag.dropout(self.ffn(y), self.dropout, rng, self.training)
        return ag.mask_fill(self.norm2(y + f), _keep(mask))


class AdditivePool(Module):
    """Collapse a ``(B, d, M)`` sequence to ``(B, d, 1)`` with softmax(W_a . x) weights."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64):
        self.score = Linear(d, 1, rng, bias=False, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, mask) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("additive pooling over an empty (fully masked) sequence")
        logits = ag.mask_fill(self.score(x), mask[:, None, :], ag.MASK_VALUE)  # (B, 1, M)
        alpha = ag.softmax(logits, axis=-1)
        self.last_weights = alpha.data[:, 0, :]
        return x @ ag.transpose(alpha)


# -- checkpoint I/O ----------------------------------------------------

def write_checkpoint(fh: BinaryIO, entries: list[tuple[str, np.ndarray]]) -> None:
    """Flat little-endian format: magic, version, count, then named f32 arrays."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError("checkpoint is truncated")
        return buf

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    return out
