import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangle_reid._validation import ValidationError
from disentangle_reid.objectives import (
    GradientReversal,
    GrlConfig,
    LossWeights,
    TripletConfig,
    batch_hard_triplet_loss,
    contrastive_loss,
    cross_entropy_loss,
    grad_reverse,
    grl_backward,
    grl_forward,
    id_loss,
    mine_hard_pairs,
    total_loss,
)

T = torch.tensor


# ------------------------------------------------------------------ GRL

def test_grl_forward_is_identity():
    x = torch.randn(3, 5, requires_grad=True)
    assert torch.equal(grl_forward(x), x)
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(grl_forward(a), a)


def test_grl_backward_negates():
    g = torch.randn(4, 3)
    assert torch.equal(grl_backward(g), -g)
    assert np.array_equal(grl_backward(np.array([1.0, -2.0])), np.array([-1.0, 2.0]))
    assert torch.equal(grl_backward(g, GrlConfig(coefficient=0.5)), -0.5 * g)


def test_grl_autograd_matches_backward_map():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(6, dtype=torch.float64)
    (grad_reverse(x) * w).sum().backward()
    assert torch.equal(x.grad, grl_backward(w))


def test_grl_rejects_nonfinite():
    with pytest.raises(ValidationError):
        grl_forward(torch.tensor([1.0, float("nan")]))
    with pytest.raises(ValidationError):
        grl_backward(np.array([float("inf")]))
    with pytest.raises(ValidationError):
        GrlConfig(coefficient=-1.0)


def test_grl_module_repr_and_coefficient():
    m = GradientReversal(2.0)
    x = torch.ones(2, requires_grad=True)
    m(x).sum().backward()
    assert torch.equal(x.grad, torch.full((2,), -2.0))
    assert "2.0" in repr(m)


# ----------------------------------------------------------- contrastive

def test_contrastive_orthonormal_pair():
    # two orthonormal matched pairs: -log(e / (e + 1)) = log(1 + e^-1)
    eye = torch.eye(2, dtype=torch.float64)
    assert contrastive_loss(eye, eye).item() == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert contrastive_loss(eye, eye).item() == pytest.approx(0.31326, abs=1e-5)


def test_contrastive_scale_invariant():
    a = torch.randn(5, 7, dtype=torch.float64)
    b = torch.randn(5, 7, dtype=torch.float64)
    assert contrastive_loss(a, b).item() == pytest.approx(contrastive_loss(3 * a, 0.5 * b).item(), abs=1e-12)


def test_contrastive_temperature_sharpens():
    eye = torch.eye(3, dtype=torch.float64)
    assert contrastive_loss(eye, eye, temperature=0.1) < contrastive_loss(eye, eye)


def test_contrastive_errors():
    with pytest.raises(ValidationError, match="zero-norm"):
        contrastive_loss(torch.zeros(2, 3), torch.ones(2, 3))
    with pytest.raises(ValidationError, match="shape"):
        contrastive_loss(torch.ones(2, 3), torch.ones(3, 3))
    with pytest.raises(ValidationError):
        contrastive_loss(torch.ones(2, 3), torch.ones(2, 3), temperature=0.0)
    with pytest.raises(ValidationError):
        contrastive_loss(torch.tensor([[1.0, float("nan")]]), torch.ones(1, 2))


# --------------------------------------------------------- cross entropy

def test_cross_entropy_pins():
    assert cross_entropy_loss(T([[2.0, 0.0]], dtype=torch.float64), T([0])).item() == pytest.approx(
        math.log1p(math.exp(-2)), abs=1e-12)
    assert cross_entropy_loss(torch.zeros(3, 4, dtype=torch.float64), T([0, 1, 3])).item() == pytest.approx(
        math.log(4), abs=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(ValidationError):
        cross_entropy_loss(torch.zeros(2, 3), T([0, 3]))
    with pytest.raises(ValidationError):
        cross_entropy_loss(torch.zeros(2, 3), T([0]))


# --------------------------------------------------------------- triplet

FIX_FEATS = T([[0.0], [0.1], [1.0], [1.1]], dtype=torch.float64)
FIX_LABELS = T([0, 0, 1, 1])


def test_triplet_fixture_margins():
    assert batch_hard_triplet_loss(FIX_FEATS, FIX_LABELS, TripletConfig(0.3)).item() == pytest.approx(0.0)
    # every anchor: d_ap = 0.1, d_an = 0.9 -> 0.1 - 0.9 + 2.0 = 1.2 ; but anchors 1 and 2 have d_an = 0.9,
    # anchors 0 and 3 have d_an = 1.0 -> 1.1 each: 1.1 + 1.2 + 1.2 + 1.1 = 4.6
    assert batch_hard_triplet_loss(FIX_FEATS, FIX_LABELS, TripletConfig(2.0)).item() == pytest.approx(4.6)
    assert batch_hard_triplet_loss(FIX_FEATS, FIX_LABELS, TripletConfig(2.0, "mean")).item() == pytest.approx(1.15)


def test_triplet_identical_features():
    feats = torch.ones(6, 3, requires_grad=True)
    labels = T([0, 0, 1, 1, 2, 2])
    loss = batch_hard_triplet_loss(feats, labels, TripletConfig(0.3))
    assert loss.item() == pytest.approx(6 * 0.3)
    loss.backward()
    assert torch.isfinite(feats.grad).all()


def test_triplet_mining_indices_on_fixture():
    _, _, pos, neg = mine_hard_pairs(FIX_FEATS, FIX_LABELS)
    assert pos.tolist() == [1, 0, 3, 2]
    assert neg.tolist() == [2, 2, 1, 1]


def test_triplet_errors():
    with pytest.raises(ValidationError, match="single instance"):
        batch_hard_triplet_loss(torch.randn(3, 2), T([0, 0, 1]))
    with pytest.raises(ValidationError, match="two distinct"):
        batch_hard_triplet_loss(torch.randn(3, 2), T([0, 0, 0]))
    with pytest.raises(ValidationError):
        TripletConfig(margin=-0.1)
    with pytest.raises(ValidationError):
        TripletConfig(reduction="max")


# ----------------------------------------------------------- combination

def test_loss_combination():
    w = LossWeights(lambda_id=2.0, lambda_b=3.0, lambda_n=0.5, lambda_c=1.5, lambda_t=0.25)
    idl = id_loss(T(1.0), T(4.0), w)
    assert idl.item() == pytest.approx(1.5 + 1.0)
    tot = total_loss(idl, T(2.0), [T(1.0), T(3.0)], w)
    assert tot.item() == pytest.approx(2 * 2.5 + 3 * 2 + 0.5 * 4)
    assert total_loss(T(1.0), T(1.0), [], LossWeights()).item() == 2.0
    with pytest.raises(ValidationError):
        LossWeights(lambda_b=-1.0)


# ------------------------------------------------------------- properties

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_contrastive_bounds(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(b, d, generator=g, dtype=torch.float64) + 1e-3
    t = torch.randn(b, d, generator=g, dtype=torch.float64) + 1e-3
    loss = contrastive_loss(a, t).item()
    # logits lie in [-1, 1]: loss within [log(1 + (b-1)e^-2), log(1 + (b-1)e^2)]
    assert math.log1p((b - 1) * math.exp(-2)) - 1e-9 <= loss <= math.log1p((b - 1) * math.exp(2)) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(0, 10_000))
def test_triplet_nonnegative_and_permutation_invariant(p, k, seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(p * k, 3, generator=g, dtype=torch.float64)
    labels = torch.arange(p).repeat_interleave(k)
    perm = torch.randperm(p * k, generator=g)
    a = batch_hard_triplet_loss(feats, labels)
    b = batch_hard_triplet_loss(feats[perm], labels[perm])
    assert a.item() >= 0
    assert a.item() == pytest.approx(b.item(), abs=1e-9)
