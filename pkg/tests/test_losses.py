import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmintent import autodiff as ad
from mmintent.autodiff import Tensor
from mmintent.data import DatasetSpec, generate
from mmintent.encoders import RepresentationBundle, StreamOutput
from mmintent.fusion import FusionOutputs
from mmintent.losses import (LOSS_TERMS, ConsistencyError, DegeneratePrototypeError, PrototypeSet,
                             compute_prototypes, infonce, multiview_contrastive, prototype_loss, total_loss)
from mmintent.model import IntentModel, ModelConfig

from gradcheck import numeric_grad, rel_error


# ---------------------------------------------------------------------------
# brute-force oracles written with scalar loops


def _cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def oracle_prototypes(h, y, C):
    protos = {}
    for c in range(C):
        members = [h[i] for i in range(len(y)) if y[i] == c]
        if members:
            mean = [sum(col) / len(members) for col in zip(*members)]
            norm = math.sqrt(sum(v * v for v in mean))
            protos[c] = [v / norm for v in mean]
    return protos


def oracle_prototype_loss(h, y, C, tau):
    protos = oracle_prototypes(h, y, C)
    total = 0.0
    for i in range(len(y)):
        denom = sum(math.exp(_cos(h[i], r) / tau) for r in protos.values())
        total += -math.log(math.exp(_cos(h[i], protos[y[i]]) / tau) / denom)
    return total / len(y)


def oracle_infonce(anchor, positive, tau):
    total = 0.0
    for i in range(len(anchor)):
        denom = 0.0
        for j in range(len(positive)):
            denom += math.exp(_cos(anchor[i], positive[j]) / tau)
        total += -math.log(math.exp(_cos(anchor[i], positive[i]) / tau) / denom)
    return total / len(anchor)


# ---------------------------------------------------------------------------
# prototypes


def test_single_instance_prototype_is_normalized_embedding():
    h = np.array([[3.0, 4.0], [1.0, 1.0]])
    p = compute_prototypes(Tensor(h), [0, 1], 3)
    np.testing.assert_allclose(p.prototypes.data[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(p.present, [True, True, False])
    np.testing.assert_array_equal(p.prototypes.data[2], 0.0)


def test_symmetric_prototype():
    p = compute_prototypes(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 0], 1)
    np.testing.assert_allclose(p.prototypes.data[0], [0.70710678, 0.70710678], atol=1e-8)


def test_prototypes_match_oracle():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((6, 4))
    y = np.array([0, 1, 2, 0, 1, 2])
    p = compute_prototypes(Tensor(h), y, 3)
    oracle = oracle_prototypes(h.tolist(), y.tolist(), 3)
    for c, r in oracle.items():
        np.testing.assert_allclose(p.prototypes.data[c], r, rtol=0, atol=1e-12)


def test_degenerate_prototype():
    with pytest.raises(DegeneratePrototypeError):
        compute_prototypes(Tensor([[1.0, 2.0], [-1.0, -2.0]]), [0, 0], 2)


def test_prototype_gradient_flows_through_construction():
    rng = np.random.default_rng(2)
    h_val = rng.standard_normal((3, 4))
    y = np.array([0, 0, 1])

    def loss_of(h):
        return prototype_loss(h, y, compute_prototypes(h, y, 2), 0.5)

    h = Tensor(h_val, requires_grad=True)
    ad.backward(loss_of(h))
    numeric = numeric_grad(lambda: float(loss_of(Tensor(h_val)).data), [h_val])[0]
    assert rel_error(h.grad, numeric) < 1e-3
    # detaching the prototypes changes the gradient, so the path is really used
    h2 = Tensor(h_val, requires_grad=True)
    ad.backward(prototype_loss(h2, y, compute_prototypes(Tensor(h_val), y, 2), 0.5))
    assert not np.allclose(h2.grad, h.grad)


# ---------------------------------------------------------------------------
# prototype loss


def test_prototype_loss_uniform_case():
    C, d = 20, 24
    protos = PrototypeSet(prototypes=Tensor(np.eye(C, d)), present=np.ones(C, dtype=bool))
    h = np.zeros((3, d))
    h[:, C:] = 1.0  # orthogonal to every prototype, so all similarities are equal
    assert prototype_loss(Tensor(h), [0, 5, 19], protos, 0.1).item() == pytest.approx(math.log(20), abs=1e-12)


def test_prototype_loss_two_class_example():
    protos = PrototypeSet(prototypes=Tensor(np.eye(2)), present=np.array([True, True]))
    value = prototype_loss(Tensor([[2.0, 0.0]]), [0], protos, 0.1).item()
    assert value == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-12)
    assert value == pytest.approx(4.54e-5, rel=1e-3)


@pytest.mark.parametrize("seed", range(10))
def test_prototype_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    B, C, d = 8, 5, 4
    h = rng.standard_normal((B, d))
    y = rng.integers(0, C, size=B)
    tau = float(rng.uniform(0.05, 1.0))
    value = prototype_loss(Tensor(h), y, compute_prototypes(Tensor(h), y, C), tau).item()
    assert value == pytest.approx(oracle_prototype_loss(h.tolist(), y.tolist(), C, tau), abs=1e-10)


def test_absent_classes_left_out_of_denominator():
    h = np.array([[1.0, 0.2], [0.1, 1.0]])
    y = np.array([0, 3])
    p = compute_prototypes(Tensor(h), y, 5)
    assert p.present.sum() == 2
    assert prototype_loss(Tensor(h), y, p, 0.3).item() == pytest.approx(
        oracle_prototype_loss(h.tolist(), y.tolist(), 5, 0.3), abs=1e-12)


def test_prototype_loss_missing_own_class():
    p = compute_prototypes(Tensor([[1.0, 0.0]]), [0], 3)
    with pytest.raises(ConsistencyError):
        prototype_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 2], p, 0.1)


def _slerp(a, b, t):
    omega = np.arccos(np.clip(a @ b, -1, 1))
    return (np.sin((1 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)


@pytest.mark.parametrize("seed", range(20))
def test_prototype_loss_falls_moving_toward_own_prototype(seed):
    # Orthonormal prototypes and non-negative similarity to every rival make
    # each rival logit gap shrink monotonically along the geodesic.
    rng = np.random.default_rng(seed)
    C, d = 4, 10
    basis, _ = np.linalg.qr(rng.standard_normal((d, C)))
    protos = PrototypeSet(prototypes=Tensor(basis.T), present=np.ones(C, dtype=bool))
    coeffs = rng.uniform(0.0, 1.0, C)
    h = rng.standard_normal((5, d))
    h[0] = basis @ coeffs + 0.3 * rng.standard_normal(d)
    y = rng.integers(0, C, size=5)
    if np.any(basis.T @ h[0] < 0):
        h[0] = basis @ coeffs
    own = basis[:, y[0]]
    start = h[0] / np.linalg.norm(h[0])
    values = []
    for t in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9):
        moved = h.copy()
        moved[0] = _slerp(start, own, t)
        values.append(prototype_loss(Tensor(moved), y, protos, 0.1).item())
    assert all(a > b for a, b in zip(values, values[1:])), values


# ---------------------------------------------------------------------------
# InfoNCE


def test_infonce_orthogonal_example():
    x = Tensor(np.eye(2))
    assert infonce(x, x, 0.1).item() == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-12)


@pytest.mark.parametrize("B", [2, 3, 7])
def test_infonce_identical_rows_give_log_b(B):
    x = Tensor(np.tile([0.3, -1.0, 2.0], (B, 1)))
    assert infonce(x, x, 0.1).item() == pytest.approx(math.log(B), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_infonce_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    a, p = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    tau = float(rng.uniform(0.05, 1.0))
    assert infonce(Tensor(a), Tensor(p), tau).item() == pytest.approx(
        oracle_infonce(a.tolist(), p.tolist(), tau), abs=1e-10)


def test_infonce_batch_of_one_is_zero(caplog):
    with caplog.at_level(logging.WARNING):
        value = infonce(Tensor([[1.0, 2.0]]), Tensor([[0.5, 0.1]]), 0.1)
    assert value.item() == 0.0
    assert "batch size 1" in caplog.text


def test_infonce_degenerate_input():
    with pytest.raises(ad.DegenerateVectorError):
        infonce(Tensor([[0.0, 0.0], [1.0, 0.0]]), Tensor(np.eye(2)), 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_infonce_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    a, p = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    base = infonce(Tensor(a), Tensor(p), 0.2).item()
    assert infonce(Tensor(a @ q), Tensor(p @ q), 0.2).item() == pytest.approx(base, abs=1e-9)


# ---------------------------------------------------------------------------
# multi-view stack and total


def fake_outputs(views, logits=None):
    """Bundle whose pooled vectors are given directly as [B, d] arrays."""
    def stream(h):
        t = Tensor(h[:, None, :], requires_grad=True)
        return StreamOutput(E=t, M=t, h=ad.masked_mean(t, np.ones((h.shape[0], 1), bool)),
                            mask=np.ones((h.shape[0], 1), bool))
    tl, tm, v, a, f = (stream(np.asarray(x, dtype=np.float64)) for x in views)
    bundle = RepresentationBundle(tl=tl, v=v, a=a, tm=tm)
    fusion = FusionOutputs(M_c=None, M_f=f.M, h_f=f.h, M_cf=f.M, fine_weights=None, attn_stats=None)
    return bundle, fusion


def test_multiview_terms_match_independent_oracles():
    rng = np.random.default_rng(4)
    views = [rng.standard_normal((4, 3)) for _ in range(5)]
    bundle, fusion = fake_outputs(views)
    l_text, l_vis, l_aud, l_fine, total = (t.item() for t in multiview_contrastive(bundle, fusion, 0.3))
    anchor = views[0].tolist()
    for value, other in zip((l_text, l_vis, l_aud, l_fine), views[1:]):
        assert value == pytest.approx(oracle_infonce(anchor, other.tolist(), 0.3), abs=1e-10)
    assert abs(total - (l_text + l_vis + l_aud + l_fine)) <= 1e-12


def test_multiview_perfect_alignment_limit():
    base = np.eye(4) * 3.0
    bundle, fusion = fake_outputs([base] * 5)
    terms = multiview_contrastive(bundle, fusion, 0.01)
    for t in terms:
        assert t.item() < 1e-40


def test_multiview_needs_masked_view():
    bundle, fusion = fake_outputs([np.eye(2)] * 5)
    bundle.tm = None
    with pytest.raises(ValueError):
        multiview_contrastive(bundle, fusion, 0.1)


def model_batch(seed=0):
    spec = DatasetSpec(num_classes=3, n_train=6, n_val=3, n_test=3, latent_dim=4, d_visual=3, d_acoustic=2,
                       vocab_size=9, text_len=5, av_len=4, min_text_len=2, min_av_len=2, seed=seed)
    batch = generate(spec)["train"]
    config = ModelConfig(num_classes=3, vocab_size=9, d_visual=3, d_acoustic=2, d_model=8, n_heads=2,
                         n_enc_layers=1, n_coarse_layers=1)
    return IntentModel(config, np.random.default_rng(seed)), batch


def _loss_and_grads(mask, seed=0):
    model, batch = model_batch(seed)
    out = model(batch, masked_view=True, mask_rng=np.random.default_rng(9))
    losses = total_loss(out.logits, batch.labels, out.bundle, out.fusion, 0.1, mask)
    model.zero_grad()
    ad.backward(losses.total)
    return losses, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]


@pytest.mark.parametrize("mask", [("cls",), ("cls", "contrastive"), ("cls", "proto"), LOSS_TERMS])
def test_ablation_masks_select_terms(mask):
    losses, _ = _loss_and_grads(mask)
    v = losses.values()
    for term in ("contrastive", "proto"):
        if term not in mask:
            assert v[f"l_{term}"] == 0.0
    expected = v["l_cls"] + v["l_proto"] + v["l_contrastive"]
    assert v["total"] == expected
    losses.check_identities(1e-12)


def test_cls_only_gradient_is_exactly_the_cross_entropy_gradient():
    _, grads = _loss_and_grads(("cls",))
    model, batch = model_batch(0)
    out = model(batch, masked_view=True, mask_rng=np.random.default_rng(9))
    model.zero_grad()
    ad.backward(ad.cross_entropy(out.logits, batch.labels))
    for g, p in zip(grads, model.parameters()):
        ref = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert g.tobytes() == ref.tobytes()


def test_full_loss_not_below_cls():
    full, _ = _loss_and_grads(LOSS_TERMS)
    v = full.values()
    assert np.isfinite(v["total"]) and v["total"] >= v["l_cls"]


def test_per_view_mean_prototypes():
    model, batch = model_batch(1)
    out = model(batch, masked_view=True, mask_rng=np.random.default_rng(2))
    losses = total_loss(out.logits, batch.labels, out.bundle, out.fusion, 0.1, LOSS_TERMS, "per-view-mean")
    b = out.bundle
    per_view = [prototype_loss(h, batch.labels, compute_prototypes(h, batch.labels, 3), 0.1).item()
                for h in (b.h_tl, b.h_v, b.h_a, b.h_tm)]
    assert losses.l_proto.item() == pytest.approx(np.mean(per_view), abs=1e-12)
    with pytest.raises(ValueError):
        total_loss(out.logits, batch.labels, out.bundle, out.fusion, 0.1, LOSS_TERMS, "views")


def test_unknown_loss_term():
    model, batch = model_batch()
    out = model(batch)
    with pytest.raises(ValueError):
        total_loss(out.logits, batch.labels, out.bundle, out.fusion, 0.1, ("cls", "triplet"))


def test_identity_check_catches_inconsistency():
    losses, _ = _loss_and_grads(LOSS_TERMS)
    losses.total = losses.total + 1e-9
    with pytest.raises(ConsistencyError):
        losses.check_identities(1e-12)
