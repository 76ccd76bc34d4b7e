"""Full intent model: encoders, coarse encoder, two DAF gates, classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import MultimodalBatch
from .encoders import FrameEncoder, RepresentationBundle, TextEncoder
from .fusion import ClassifierHead, CoarseEncoder, DynamicAttentionFusion, FusionOutputs, coarse_to_fine
from .layers import Module


@dataclass
class ModelConfig:
    num_classes: int
    vocab_size: int
    d_visual: int
    d_acoustic: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_coarse_layers: int = 2
    p_mask: float = 0.15
    coarse_kv: str = "literal"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    bundle: RepresentationBundle
    fusion: FusionOutputs
    logits: object


class IntentModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d, h = config.d_model, config.n_heads
        self.text = TextEncoder(rng, config.vocab_size, d, h, config.n_enc_layers)
        self.visual = FrameEncoder(rng, config.d_visual, d, h, config.n_enc_layers)
        self.acoustic = FrameEncoder(rng, config.d_acoustic, d, h, config.n_enc_layers)
        self.coarse = CoarseEncoder(rng, d, h, config.n_coarse_layers, config.coarse_kv)
        self.daf_fine = DynamicAttentionFusion(rng, d)
        self.daf_coarse = DynamicAttentionFusion(rng, d)
        self.head = ClassifierHead(rng, d, config.num_classes)

    def check_batch(self, batch: MultimodalBatch) -> None:
        c = self.config
        if batch.visual.shape[2] != c.d_visual or batch.acoustic.shape[2] != c.d_acoustic:
            raise ValueError(
                f"batch feature dims ({batch.visual.shape[2]}, {batch.acoustic.shape[2]}) do not match "
                f"model ({c.d_visual}, {c.d_acoustic})")
        if batch.vocab_size > c.vocab_size or batch.num_classes != c.num_classes:
            raise ValueError("batch vocabulary or class count does not match the model")

    def __call__(self, batch: MultimodalBatch, masked_view: bool = False,
                 mask_rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Run the full pipeline; ``masked_view`` also encodes the masked text view."""
        self.check_batch(batch)
        tl = self.text(batch.text, batch.text_mask)
        tm = None
        if masked_view:
            tm = self.text(batch.text, batch.text_mask, mask_view=True,
                           p_mask=self.config.p_mask, rng=mask_rng)
        v = self.visual(batch.visual, batch.visual_mask)
        a = self.acoustic(batch.acoustic, batch.acoustic_mask)
        bundle = RepresentationBundle(tl=tl, v=v, a=a, tm=tm)
        M_c = self.coarse(tl.M, v.M, a.M, v.mask, a.mask)
        fusion = coarse_to_fine(bundle, M_c, self.daf_fine, self.daf_coarse)
        logits = self.head(fusion.M_cf, batch.text_mask)
        return ForwardResult(bundle=bundle, fusion=fusion, logits=logits)
