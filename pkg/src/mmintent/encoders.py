"""Per-modality encoders producing the E -> M -> h representation hierarchy.

Text is embedded by lookup; visual and acoustic frames by a linear input
projection.  Each stream adds sinusoidal positions, runs a stack of
self-attention blocks, and is mean-pooled over its valid positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import AttentionBlock, Linear, Module, param, sinusoidal_positions


class VocabError(ValueError):
    pass


@dataclass
class StreamOutput:
    E: Tensor
    M: Tensor
    h: Tensor
    mask: np.ndarray


@dataclass
class RepresentationBundle:
    """E/M/h for every view of one batch; fusion fills the remaining fields."""

    tl: StreamOutput
    v: StreamOutput
    a: StreamOutput
    tm: Optional[StreamOutput] = None
    M_c: Optional[Tensor] = None
    M_f: Optional[Tensor] = None
    h_f: Optional[Tensor] = None
    M_cf: Optional[Tensor] = None

    @property
    def h_tl(self) -> Tensor:
        return self.tl.h

    @property
    def h_tm(self) -> Optional[Tensor]:
        return None if self.tm is None else self.tm.h

    @property
    def h_v(self) -> Tensor:
        return self.v.h

    @property
    def h_a(self) -> Tensor:
        return self.a.h


class SequenceEncoder(Module):
    """Positions + ``n_layers`` self-attention blocks + masked mean-pool."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, n_layers: int, max_len: int):
        self.d = d
        self.blocks = [AttentionBlock(rng, d, n_heads) for _ in range(n_layers)]
        self._positions = sinusoidal_positions(max_len, d)

    def contextualize(self, E: Tensor, mask: np.ndarray) -> StreamOutput:
        M = E
        for block in self.blocks:
            M = block(M, key_mask=mask)
        return StreamOutput(E=E, M=M, h=ad.masked_mean(M, mask, axis=1), mask=mask)

    def positions(self, length: int) -> np.ndarray:
        if length > self._positions.shape[0]:
            self._positions = sinusoidal_positions(length, self.d)
        return self._positions[:length]


class TextEncoder(SequenceEncoder):
    def __init__(self, rng, vocab_size: int, d: int, n_heads: int, n_layers: int, max_len: int = 64):
        self.vocab_size = vocab_size
        self.embed = param(rng.standard_normal((vocab_size, d)) * 0.1)
        self.mask_embed = param(rng.standard_normal(d) * 0.1)
        super().__init__(rng, d, n_heads, n_layers, max_len)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray, mask_view: bool = False,
                 p_mask: float = 0.15, rng: Optional[np.random.Generator] = None) -> StreamOutput:
        """Encode token ids.

        With ``mask_view`` each non-pad position is independently replaced by
        the learned MASK embedding with probability ``p_mask``; the draw is
        ``rng.random(tokens.shape) < p_mask`` restricted to valid positions.
        """
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise VocabError(f"token ids must lie in [0, {self.vocab_size})")
        E = ad.take(self.embed, tokens, axis=0)
        if mask_view:
            if rng is None:
                raise ValueError("mask_view requires an rng")
            masked = (rng.random(tokens.shape) < p_mask) & mask
            if masked.any():
                E = ad.where(masked[:, :, None], self.mask_embed, E)
        E = E + self.positions(tokens.shape[1])
        return self.contextualize(E, mask)


class FrameEncoder(SequenceEncoder):
    """Encoder for continuous frame features (visual or acoustic)."""

    def __init__(self, rng, d_in: int, d: int, n_heads: int, n_layers: int, max_len: int = 64):
        self.d_in = d_in
        self.proj = Linear(rng, d_in, d)
        super().__init__(rng, d, n_heads, n_layers, max_len)

    def __call__(self, frames: np.ndarray, mask: np.ndarray) -> StreamOutput:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != self.d_in:
            raise ad.DimensionError(f"expected frames [B, L, {self.d_in}], got {frames.shape}")
        E = self.proj(Tensor(frames)) + self.positions(frames.shape[1])
        return self.contextualize(E, mask)
