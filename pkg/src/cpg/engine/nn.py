"""Minimal layer library on top of the tape."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Parameter container; children and parameters are found by attribute scan."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            if p.shape != tuple(state[n].shape):
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data[...] = state[n]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def xavier(rng, fan_in, fan_out, shape=None, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, gain: float = 1.0):
        self.weight = param(xavier(rng, d_in, d_out, gain=gain))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng, std: float = 0.02):
        self.table = param(rng.normal(0.0, std, size=(n, d)))

    def forward(self, ids):
        return ops.embedding_lookup(self.table, ids)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, padding: int, rng):
        fan_in = k * k * c_in
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, c_in, c_out)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng):
        if d % n_heads:
            raise ValueError(f"d_model={d} not divisible by n_heads={n_heads}")
        self.h = n_heads
        self.dh = d // n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return ops.transpose(x.reshape(B, L, self.h, self.dh), (0, 2, 1, 3))

    def forward(self, xq: Tensor, xk: Tensor, xv: Tensor,
                key_pad: Optional[np.ndarray] = None) -> Tensor:
        """Scaled dot-product attention; ``key_pad`` (B, Lk) True marks ignored keys."""
        B, Lq, d = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xk))
        v = self._split(self.v(xv))
        scores = (q @ ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.dh))
        if key_pad is not None:
            scores = ops.masked_fill(scores, key_pad[:, None, None, :], -1e9)
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, Lq, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block; ``pos`` is added to queries and keys."""

    def __init__(self, d, n_heads, rng, ff_mult=4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult * d, rng)

    def forward(self, x, key_pad=None, pos=None):
        h = self.ln1(x)
        qk = h + pos if pos is not None else h
        x = x + self.attn(qk, qk, h, key_pad)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    """Pre-norm block: query self-attention, cross-attention to memory, FFN."""

    def __init__(self, d, n_heads, rng, ff_mult=4):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult * d, rng)

    def forward(self, x, memory, query_pos, memory_pos=None, memory_pad=None):
        h = self.ln1(x)
        qk = h + query_pos
        x = x + self.self_attn(qk, qk, h)
        h = self.ln2(x)
        mk = memory + memory_pos if memory_pos is not None else memory
        x = x + self.cross_attn(h + query_pos, mk, memory, memory_pad)
        return x + self.ff(self.ln3(x))
