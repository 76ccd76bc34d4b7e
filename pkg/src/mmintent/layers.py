"""Parameter containers and transformer building blocks."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``; child
    modules may be attributes or lists of modules.  Attribute insertion order
    fixes the parameter order, which keeps checkpoints deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ad.DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


def param(values: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = param(glorot(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.DimensionError(f"Linear: expected last dim {self.d_in}, got shape {x.shape}")
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.up = Linear(rng, d, hidden)
        self.down = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query/key/value sources.

    ``key_mask`` is [B, Lk] boolean; masked keys receive weight exactly 0.
    The last attention weights are kept on ``self.last_weights`` ([B, H, Lq, Lk])
    for diagnostics.
    """

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.q_proj = Linear(rng, d, d)
        self.k_proj = Linear(rng, d, d)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.n_heads, self.d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        if key.shape[:2] != value.shape[:2]:
            raise ad.DimensionError(f"attention: keys {key.shape} and values {value.shape} differ in length")
        if query.shape[0] != key.shape[0]:
            raise ad.DimensionError(f"attention: batch sizes {query.shape[0]} and {key.shape[0]} differ")
        b, lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        ctx, self.last_weights = ad.attention(q, k, v, mask, scale=1.0 / np.sqrt(self.d // self.n_heads))
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, lq, self.d)
        return self.out_proj(ctx)


class AttentionBlock(Module):
    """Post-norm transformer block: x = LN(x + Attn); x = LN(x + FFN)."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ff_mult: int = 2):
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.norm1 = LayerNorm(d)
        self.ff = FeedForward(rng, d, ff_mult * d)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, key: Optional[Tensor] = None, value: Optional[Tensor] = None,
                 key_mask=None) -> Tensor:
        key = x if key is None else key
        value = key if value is None else value
        x = self.norm1(x + self.attn(x, key, value, key_mask))
        return self.norm2(x + self.ff(x))
