import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drfuse import kernels as K
from drfuse.errors import InvalidConfigError, InvalidInputError, InvalidMaskError, ShapeError
from drfuse.gradcheck import check_gradient

INF = math.inf


def t(*xs):
    return torch.tensor(xs, dtype=torch.float64)


def bounded_vectors(d, lo=-30.0, hi=30.0):
    return arrays(np.float64, d, elements=st.floats(lo, hi, allow_nan=False, allow_infinity=False))


# -- sigmoid / logit ---------------------------------------------------------


def test_sigmoid_examples():
    assert K.sigmoid(t(0.0)).item() == 0.5
    assert K.sigmoid(t(40.0)).item() == 1 - 1e-7
    assert K.sigmoid(t(math.log(4))).item() == pytest.approx(0.8, abs=1e-15)


def test_sigmoid_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        K.sigmoid(t(0.0, math.nan))
    with pytest.raises(InvalidInputError):
        K.sigmoid(t(INF))


def test_logit_examples():
    assert K.logit(t(0.5)).item() == 0.0
    assert K.logit(t(0.8)).item() == pytest.approx(1.386294361, abs=1e-9)
    p = torch.linspace(1e-6, 1 - 1e-6, 2001, dtype=torch.float64)
    assert (K.sigmoid(K.logit(p)) - p).abs().max().item() < 1e-9


def test_logit_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        K.logit(t(1.5))
    with pytest.raises(InvalidInputError):
        K.logit(t(-0.1))


# -- logit pooling -------------------------------------------------------------


def test_logit_pool_examples():
    assert K.logit_pool(t(0.0), t(0.0)).item() == 0.0
    assert K.logit_pool(t(1.5), t(1.5)).item() == pytest.approx(1.5, abs=1e-12)
    # sigma values 0.8 and 0.4 average to 0.6
    got = K.logit_pool(t(math.log(4)), t(math.log(2 / 3))).item()
    assert got == pytest.approx(0.405465108108164, abs=1e-12)


def test_logit_pool_matches_definition_on_grid():
    # high-precision reference through the probability route
    mpmath.mp.dps = 50
    grid = np.linspace(-30, 30, 41)
    a, b = np.meshgrid(grid, grid, indexing="ij")
    ref = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        pa = 1 / (1 + mpmath.exp(-mpmath.mpf(a[idx])))
        pb = 1 / (1 + mpmath.exp(-mpmath.mpf(b[idx])))
        m = (pa + pb) / 2
        ref[idx] = float(mpmath.log(m / (1 - m)))
    got = K.logit_pool(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    assert np.abs(got - ref).max() < 1e-9


def test_logit_pool_shape_mismatch():
    with pytest.raises(ShapeError):
        K.logit_pool(t(0.0, 1.0), t(0.0))


@settings(max_examples=200, deadline=None)
@given(bounded_vectors(6), bounded_vectors(6))
def test_logit_pool_properties(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    pooled = K.logit_pool(a, b)
    assert torch.equal(pooled, K.logit_pool(b, a))
    assert (K.logit_pool(a, a) - a).abs().max().item() < 1e-9
    assert bool((pooled >= torch.minimum(a, b) - 1e-12).all())
    assert bool((pooled <= torch.maximum(a, b) + 1e-12).all())


# -- JSD -----------------------------------------------------------------------


def test_jsd_examples():
    v = t(0.3, -2.0, 7.0)
    assert K.jsd_from_logits(v, v).item() == pytest.approx(0.0, abs=1e-15)
    assert K.jsd_from_logits(t(20.0), t(-20.0)).item() == pytest.approx(math.log(2), abs=1e-6)
    got = K.jsd_from_logits(K.logit(t(0.75)), K.logit(t(0.25))).item()
    assert got == pytest.approx(0.13081203594113697, abs=1e-12)


def test_jsd_matches_four_term_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h1, h2 = rng.uniform(-5, 5, 4), rng.uniform(-5, 5, 4)
        total = 0.0
        for a, b in zip(h1, h2):
            p, q = 1 / (1 + math.exp(-a)), 1 / (1 + math.exp(-b))
            m = (p + q) / 2
            kl_p = p * math.log(p / m) + (1 - p) * math.log((1 - p) / (1 - m))
            kl_q = q * math.log(q / m) + (1 - q) * math.log((1 - q) / (1 - m))
            total += 0.5 * (kl_p + kl_q)
        got = K.jsd_from_logits(torch.from_numpy(h1), torch.from_numpy(h2)).item()
        assert got == pytest.approx(total / 4, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(bounded_vectors(5), bounded_vectors(5))
def test_jsd_properties(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    j = K.jsd_from_logits(a, b).item()
    assert 0.0 <= j <= math.log(2)
    assert j == pytest.approx(K.jsd_from_logits(b, a).item(), abs=1e-15)


# -- orthogonality ---------------------------------------------------------------


def test_orthogonality_examples():
    assert K.orthogonality_penalty(t(1.0, 0.0), t(0.0, 1.0)).item() == 0.0
    v = t(0.3, -1.2, 2.0)
    assert K.orthogonality_penalty(v, v).item() == pytest.approx(1.0, abs=1e-12)
    assert K.orthogonality_penalty(v, -v).item() == pytest.approx(1.0, abs=1e-12)
    assert K.orthogonality_penalty(t(1.0, 0.0), t(1.0, 1.0)).item() == pytest.approx(
        1 / math.sqrt(2), abs=1e-12
    )


def test_orthogonality_zero_norm_is_finite():
    assert K.orthogonality_penalty(t(0.0, 0.0), t(1.0, 1.0)).item() == 0.0


# -- masked attention ------------------------------------------------------------


def test_masked_attention_examples():
    out = K.masked_scaled_attention(t(0.5, 0.5, 0.5), t(0.0, 0.0, 0.0), 4)
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64), atol=1e-15)
    out = K.masked_scaled_attention(t(0.5, 0.5, 0.5), t(0.0, 0.0, -INF), 4)
    assert out.tolist() == [0.5, 0.5, 0.0]
    out = K.masked_scaled_attention(t(1.0, 2.0, 3.0), t(0.0, 0.0, 0.0), 1)
    expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
    assert out.tolist() == pytest.approx(expected, abs=1e-12)


def test_masked_attention_errors():
    with pytest.raises(InvalidMaskError):
        K.masked_scaled_attention(t(1.0, 2.0, 3.0), t(-INF, -INF, -INF), 2)
    with pytest.raises(InvalidMaskError):
        K.masked_scaled_attention(t(1.0, 2.0, 3.0), t(1.0, 0.0, 0.0), 2)
    with pytest.raises(InvalidInputError):
        K.masked_scaled_attention(t(1.0, math.nan, 3.0), t(0.0, 0.0, 0.0), 2)


# -- ranking loss ------------------------------------------------------------------


def test_rank_loss_examples():
    eps = 0.1
    loss = K.margin_rank_attn_loss(t(0.1, 0.3, 0.6)[None], t(0.3, 0.2, 0.1)[None], eps)
    assert loss.item() == 0.0
    loss = K.margin_rank_attn_loss(t(0.2, 0.3, 0.5)[None], t(0.1, 0.2, 0.3)[None], eps)
    assert loss.item() == pytest.approx(0.45, abs=1e-12)
    loss = K.margin_rank_attn_loss(torch.full((1, 3), 1 / 3, dtype=torch.float64),
                                   t(0.2, 0.2, 0.2)[None], eps)
    assert loss.item() == 0.0


def test_rank_loss_enumerated_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n_classes = rng.integers(1, 6)
        alpha = rng.dirichlet(np.ones(3), size=n_classes)
        aux = rng.uniform(0, 2, size=(n_classes, 3))
        eps = rng.uniform(0, 0.3)
        total = 0.0
        for c in range(n_classes):
            for i in range(3):
                for j in range(3):
                    if i != j and aux[c, i] < aux[c, j]:
                        total += max(0.0, alpha[c, j] - alpha[c, i] + eps)
        got = K.margin_rank_attn_loss(torch.from_numpy(alpha), torch.from_numpy(aux), eps).item()
        assert got == pytest.approx(total / (2 * n_classes), abs=1e-12)


def test_rank_loss_negative_margin():
    with pytest.raises(InvalidConfigError):
        K.margin_rank_attn_loss(t(0.2, 0.3, 0.5)[None], t(0.1, 0.2, 0.3)[None], -0.1)


def test_rank_loss_does_not_backprop_into_aux():
    alpha = t(0.2, 0.3, 0.5)[None].requires_grad_(True)
    aux = t(0.1, 0.2, 0.3)[None].requires_grad_(True)
    K.margin_rank_attn_loss(alpha, aux, 0.1).backward()
    assert aux.grad is None
    assert alpha.grad is not None


def test_rank_loss_batched():
    alpha = torch.tensor([[[0.1, 0.3, 0.6]], [[0.2, 0.3, 0.5]]], dtype=torch.float64)
    aux = torch.tensor([[[0.3, 0.2, 0.1]], [[0.1, 0.2, 0.3]]], dtype=torch.float64)
    assert K.margin_rank_attn_loss(alpha, aux, 0.1).tolist() == pytest.approx([0.0, 0.45])


# -- cross entropy -------------------------------------------------------------------


def test_bce_examples():
    assert K.binary_cross_entropy(t(1.0), t(1 - 1e-7)).item() == pytest.approx(1e-7, rel=1e-6)
    assert K.binary_cross_entropy(t(1.0), t(0.5)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert K.binary_cross_entropy(t(0.0), t(0.5)).item() == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ShapeError):
        K.binary_cross_entropy(t(1.0, 0.0), t(0.5))


# -- gradient contracts ----------------------------------------------------------------


GRAD_CASES = {
    "sigmoid": (lambda h: K.sigmoid(h).sum(), 1),
    "logit": (lambda h: K.logit(torch.sigmoid(h)).pow(2).sum(), 1),
    "logit_pool": (lambda a, b: (K.logit_pool(a, b) * torch.arange(1.0, 6.0, dtype=a.dtype)).sum(), 2),
    "jsd": (lambda a, b: K.jsd_from_logits(a, b), 2),
    "orthogonality": (lambda a, b: K.orthogonality_penalty(a, b), 2),
    "attention": (
        lambda s: (K.masked_scaled_attention(s[:3], t(0.0, 0.0, 0.0), 5) * t(1.0, -2.0, 0.5)).sum(), 1),
    "attention_masked": (
        lambda s: (K.masked_scaled_attention(s[:3], t(0.0, 0.0, -INF), 5) * t(1.0, -2.0, 0.5)).sum(), 1),
    "bce": (lambda h: K.binary_cross_entropy(t(1.0, 0.0, 1.0, 0.0, 1.0), torch.sigmoid(h)).sum(), 1),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_kernel_gradients_match_finite_differences(name):
    fn, n_args = GRAD_CASES[name]
    gen = torch.Generator().manual_seed(7)
    for _ in range(20):
        args = [torch.rand(5, generator=gen, dtype=torch.float64) * 10 - 5 for _ in range(n_args)]
        assert check_gradient(fn, args) < 1e-4


def test_rank_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    for _ in range(20):
        alpha = torch.rand(4, 3, generator=gen, dtype=torch.float64) * 10 - 5
        aux = torch.rand(4, 3, generator=gen, dtype=torch.float64)
        err = check_gradient(lambda a: K.margin_rank_attn_loss(torch.softmax(a, -1), aux, 0.1), [alpha])
        assert err < 1e-4
