"""Coarse cross-modal encoding and coarse-to-fine dynamic attention fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import RepresentationBundle
from .layers import AttentionBlock, Linear, Module, param


class EmptyFusionError(ValueError):
    pass


class CoarseEncoder(Module):
    """Cross-attention stack with text queries, visual keys and acoustic values.

    ``kv_mode="literal"`` uses visual frames as keys and acoustic frames as
    values.  ``kv_mode="symmetric"`` feeds the average of the two streams as
    both keys and values.  Visual and acoustic streams must share their frame
    grid; the key mask is the intersection of their masks.
    """

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, n_layers: int,
                 kv_mode: str = "literal"):
        if kv_mode not in ("literal", "symmetric"):
            raise ValueError(f"unknown kv_mode {kv_mode!r}")
        self.kv_mode = kv_mode
        self.blocks = [AttentionBlock(rng, d, n_heads) for _ in range(n_layers)]

    def __call__(self, M_t: Tensor, M_v: Tensor, M_a: Tensor, v_mask, a_mask) -> Tensor:
        if M_v.shape[:2] != M_a.shape[:2]:
            raise ad.DimensionError(
                f"coarse encoder: visual {M_v.shape} and acoustic {M_a.shape} must share batch and length")
        if not (M_t.shape[-1] == M_v.shape[-1] == M_a.shape[-1]):
            raise ad.DimensionError("coarse encoder: streams must share the model dimension")
        kv_mask = np.asarray(v_mask, dtype=bool) & np.asarray(a_mask, dtype=bool)
        if self.kv_mode == "literal":
            keys, values = M_v, M_a
        else:
            keys = values = (M_v + M_a) * 0.5
        x = M_t
        for block in self.blocks:
            x = block(x, key=keys, value=values, key_mask=kv_mask)
        return x

    def attention_weights(self) -> List[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]


@dataclass
class Stream:
    """One DAF input: token features, their mask, and whether they sit on the text grid."""

    name: str
    tokens: Tensor
    mask: np.ndarray
    aligned: bool = True


class DynamicAttentionFusion(Module):
    """Additive-attention gate over pooled stream summaries.

    score_m = v . tanh(U s_m), alpha = softmax(score / sqrt(d)) across streams.
    Aligned streams contribute their token features; others contribute their
    pooled summary broadcast over the text positions.
    """

    def __init__(self, rng: np.random.Generator, d: int):
        self.d = d
        self.U = Linear(rng, d, d, bias=False)
        self.v = param(rng.standard_normal((d, 1)) / np.sqrt(d))

    def __call__(self, streams: Sequence[Stream], forced_weights=None):
        if not streams:
            raise EmptyFusionError("DAF needs at least one stream")
        summaries = [ad.masked_mean(s.tokens, s.mask, axis=1) for s in streams]
        b = summaries[0].shape[0]
        if forced_weights is not None:
            alpha = Tensor(np.broadcast_to(np.asarray(forced_weights, dtype=np.float64), (b, len(streams))))
        else:
            stacked = ad.stack(summaries, axis=1)
            scores = (ad.tanh(self.U(stacked)) @ self.v).reshape(b, len(streams))
            alpha = ad.softmax(scores * (1.0 / np.sqrt(self.d)), axis=1)
        fused = None
        for m, (stream, summary) in enumerate(zip(streams, summaries)):
            weight = ad.take(alpha, [m], axis=1).reshape(b, 1, 1)
            feats = stream.tokens if stream.aligned else summary.reshape(b, 1, self.d)
            term = weight * feats
            fused = term if fused is None else fused + term
        return fused, alpha


@dataclass
class FusionOutputs:
    M_c: Tensor
    M_f: Tensor
    h_f: Tensor
    M_cf: Tensor
    fine_weights: Tensor     # DAF-1 over (text, visual, acoustic)
    attn_stats: Tensor       # DAF-2 over (fine, coarse)

    FINE_STREAMS = ("text", "visual", "acoustic")
    COARSE_STREAMS = ("fine", "coarse")


def coarse_to_fine(bundle: RepresentationBundle, M_c: Tensor, daf_fine: DynamicAttentionFusion,
                   daf_coarse: DynamicAttentionFusion, forced_fine_weights=None) -> FusionOutputs:
    """DAF-1 fuses text/visual/acoustic into M_f; DAF-2 fuses M_f with M_c into M_cf."""
    text_mask = bundle.tl.mask
    M_f, alpha_fine = daf_fine(
        [Stream("text", bundle.tl.M, text_mask, aligned=True),
         Stream("visual", bundle.v.M, bundle.v.mask, aligned=False),
         Stream("acoustic", bundle.a.M, bundle.a.mask, aligned=False)],
        forced_weights=forced_fine_weights,
    )
    h_f = ad.masked_mean(M_f, text_mask, axis=1)
    M_cf, alpha_coarse = daf_coarse(
        [Stream("fine", M_f, text_mask, aligned=True),
         Stream("coarse", M_c, text_mask, aligned=True)],
    )
    bundle.M_c, bundle.M_f, bundle.h_f, bundle.M_cf = M_c, M_f, h_f, M_cf
    return FusionOutputs(M_c=M_c, M_f=M_f, h_f=h_f, M_cf=M_cf,
                         fine_weights=alpha_fine, attn_stats=alpha_coarse)


class ClassifierHead(Module):
    """logits = W . masked_mean(M_cf) + b."""

    def __init__(self, rng: np.random.Generator, d: int, num_classes: int):
        self.W = param(rng.standard_normal((d, num_classes)) / np.sqrt(d))
        self.b = param(np.zeros(num_classes))

    def __call__(self, M_cf: Tensor, text_mask: Optional[np.ndarray] = None) -> Tensor:
        pooled = M_cf if M_cf.ndim == 2 else ad.masked_mean(M_cf, text_mask, axis=1)
        return pooled @ self.W + self.b
