"""Training objectives: prototypes, prototype InfoNCE, multi-view InfoNCE, totals."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import RepresentationBundle
from .fusion import FusionOutputs

logger = logging.getLogger(__name__)

LOSS_TERMS = ("cls", "contrastive", "proto")


class ConsistencyError(ValueError):
    pass


class DegeneratePrototypeError(ad.DegenerateVectorError):
    pass


@dataclass
class PrototypeSet:
    prototypes: Tensor   # [C, d]; rows of absent classes are zero
    present: np.ndarray  # bool [C]


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_proto: Tensor
    l_text: Tensor
    l_vis: Tensor
    l_aud: Tensor
    l_fine: Tensor
    l_contrastive: Tensor
    total: Tensor

    FIELDS = ("l_cls", "l_proto", "l_text", "l_vis", "l_aud", "l_fine", "l_contrastive", "total")

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in self.FIELDS}

    def check_identities(self, tol: float = 1e-12) -> None:
        """Raise if the contrastive or total sum identities are violated."""
        v = self.values()
        contrastive = v["l_text"] + v["l_vis"] + v["l_aud"] + v["l_fine"]
        if abs(v["l_contrastive"] - contrastive) > tol:
            raise ConsistencyError(f"contrastive sum off by {v['l_contrastive'] - contrastive:.3e}")
        total = v["l_cls"] + v["l_proto"] + v["l_contrastive"]
        if abs(v["total"] - total) > tol:
            raise ConsistencyError(f"total sum off by {v['total'] - total:.3e}")


def _zero() -> Tensor:
    return Tensor(np.asarray(0.0))


def compute_prototypes(h: Tensor, labels, num_classes: int) -> PrototypeSet:
    """Batch-local class means of ``h`` [B, d], L2-normalized; stays on the graph."""
    labels = np.asarray(labels, dtype=np.int64)
    if h.ndim != 2 or labels.shape != (h.shape[0],):
        raise ad.DimensionError(f"compute_prototypes: h {h.shape} vs labels {labels.shape}")
    if h.shape[0] < 1:
        raise ValueError("compute_prototypes: empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ad.LabelError(f"labels must lie in [0, {num_classes})")
    onehot = np.zeros((num_classes, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    counts = onehot.sum(axis=1)
    present = counts > 0
    averaging = onehot / np.maximum(counts, 1.0)[:, None]
    means = Tensor(averaging) @ h
    idx = np.flatnonzero(present)
    norms = np.sqrt((means.data[idx] ** 2).sum(axis=1))
    if np.any(norms <= ad.NORM_EPS):
        bad = idx[norms <= ad.NORM_EPS].tolist()
        raise DegeneratePrototypeError(f"degenerate prototype for classes {bad}")
    normalized = ad.l2_normalize(ad.take(means, idx, axis=0), axis=1)
    # scatter present rows back to a [C, d] table
    scatter = np.zeros((num_classes, idx.size))
    scatter[idx, np.arange(idx.size)] = 1.0
    return PrototypeSet(prototypes=Tensor(scatter) @ normalized, present=present)


def prototype_loss(h: Tensor, labels, protos: PrototypeSet, tau: float) -> Tensor:
    """Mean over instances of -log softmax_c(cos(h_i, r_c) / tau) at c = y_i.

    The softmax ranges over present classes only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    if not protos.present[labels].all():
        missing = sorted(set(labels[~protos.present[labels]].tolist()))
        raise ConsistencyError(f"prototype missing for classes {missing}")
    idx = np.flatnonzero(protos.present)
    remap = np.full(protos.present.shape, -1)
    remap[idx] = np.arange(idx.size)
    anchors = ad.take(protos.prototypes, idx, axis=0)
    sims = ad.l2_normalize(h, axis=1) @ anchors.T
    return ad.cross_entropy(sims * (1.0 / tau), remap[labels])


def infonce(anchor: Tensor, positive: Tensor, tau: float) -> Tensor:
    """In-batch InfoNCE with cosine similarity.

    Anchor i's positive is ``positive[i]``; every other row of ``positive``
    is a negative, and the denominator includes the positive.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if anchor.shape != positive.shape or anchor.ndim != 2:
        raise ad.DimensionError(f"infonce: anchor {anchor.shape} vs positive {positive.shape}")
    b = anchor.shape[0]
    a_n = ad.l2_normalize(anchor, axis=1)
    p_n = ad.l2_normalize(positive, axis=1)
    if b == 1:
        logger.warning("infonce called with batch size 1; no negatives, returning 0")
        return (a_n * p_n).sum() * 0.0
    sims = a_n @ p_n.T
    return ad.cross_entropy(sims * (1.0 / tau), np.arange(b))


def multiview_contrastive(bundle: RepresentationBundle, fusion_out: FusionOutputs, tau: float):
    """Text-anchored InfoNCE against the masked-text, visual, acoustic and fused views."""
    if bundle.tm is None:
        raise ValueError("multiview_contrastive needs the masked text view (h_tm)")
    anchor = bundle.h_tl
    l_text = infonce(anchor, bundle.h_tm, tau)
    l_vis = infonce(anchor, bundle.h_v, tau)
    l_aud = infonce(anchor, bundle.h_a, tau)
    l_fine = infonce(anchor, fusion_out.h_f, tau)
    return l_text, l_vis, l_aud, l_fine, l_text + l_vis + l_aud + l_fine


def proto_term(bundle: RepresentationBundle, fusion_out: FusionOutputs, labels, num_classes: int,
               tau: float, proto_views: str = "fused") -> Tensor:
    if proto_views == "fused":
        views = [fusion_out.h_f]
    elif proto_views == "per-view-mean":
        views = [bundle.h_tl, bundle.h_v, bundle.h_a]
        if bundle.h_tm is not None:
            views.append(bundle.h_tm)
    else:
        raise ValueError(f"unknown proto_views {proto_views!r}")
    terms = [prototype_loss(h, labels, compute_prototypes(h, labels, num_classes), tau) for h in views]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out if len(terms) == 1 else out * (1.0 / len(terms))


def total_loss(logits: Tensor, labels, bundle: RepresentationBundle, fusion_out: FusionOutputs,
               tau: float, mask=LOSS_TERMS, proto_views: str = "fused") -> LossBreakdown:
    """Unweighted sum of the enabled loss terms.

    Disabled terms are reported as exact zeros and are never built into the
    graph, so they contribute neither value nor gradient.
    """
    mask = set(mask)
    unknown = mask - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    l_cls = ad.cross_entropy(logits, labels) if "cls" in mask else _zero()
    if "contrastive" in mask:
        l_text, l_vis, l_aud, l_fine, l_con = multiview_contrastive(bundle, fusion_out, tau)
    else:
        l_text = l_vis = l_aud = l_fine = l_con = _zero()
    if "proto" in mask:
        l_proto = proto_term(bundle, fusion_out, labels, logits.shape[1], tau, proto_views)
    else:
        l_proto = _zero()
    total = l_cls + l_proto + l_con
    return LossBreakdown(l_cls, l_proto, l_text, l_vis, l_aud, l_fine, l_con, total)
