"""Differentiable numeric operators used by the fusion model and its losses.

Every operator works on torch tensors whose *last* axis is the feature axis;
any leading axes are treated as batch axes and carried through.  Plain Python
numbers, lists and numpy arrays are accepted too and promoted to float64.
"""

from __future__ import annotations

import math

import torch

from .errors import InvalidConfigError, InvalidInputError, InvalidMaskError, ShapeError

P_MIN = 1e-7
ORTH_EPS = 1e-12
LN2 = math.log(2.0)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidInputError(f"{name} contains non-finite entries")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def sigmoid(h) -> torch.Tensor:
    """Logistic function, clamped to ``[P_MIN, 1 - P_MIN]``."""
    h = _as_tensor(h)
    _check_finite(h, "logits")
    return torch.sigmoid(h).clamp(P_MIN, 1.0 - P_MIN)


def logit(p) -> torch.Tensor:
    p = _as_tensor(p)
    if bool(torch.isnan(p).any()) or bool(((p < 0) | (p > 1)).any()):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    p = p.clamp(P_MIN, 1.0 - P_MIN)
    return torch.log(p) - torch.log1p(-p)


def logit_pool(h1, h2) -> torch.Tensor:
    """Logit of the average of the two induced Bernoulli probabilities.

    Evaluated as ``lse(ln2 + a + b, a, b) - lse(ln2, a, b)``.  The arguments
    are ordered elementwise first so the result is exactly symmetric.
    """
    h1, h2 = _as_tensor(h1), _as_tensor(h2)
    _check_same_shape(h1, h2)
    _check_finite(h1, "h1")
    _check_finite(h2, "h2")
    lo, hi = torch.minimum(h1, h2), torch.maximum(h1, h2)
    ln2 = torch.full_like(lo, LN2)
    num = torch.logsumexp(torch.stack([ln2 + lo + hi, lo, hi]), dim=0)
    den = torch.logsumexp(torch.stack([ln2, lo, hi]), dim=0)
    return num - den


def mean_pool(h1, h2) -> torch.Tensor:
    """Arithmetic mean of two logit vectors (ablation stand-in for logit_pool)."""
    h1, h2 = _as_tensor(h1), _as_tensor(h2)
    _check_same_shape(h1, h2)
    return 0.5 * (h1 + h2)


def jsd_from_logits(h1, h2) -> torch.Tensor:
    """Jensen-Shannon divergence between factorised Bernoulli distributions.

    ``h1`` and ``h2`` hold the logits of d independent Bernoulli variables.
    The per-dimension divergence (natural log, both outcomes) is averaged
    over the last axis, so the result lies in ``[0, ln 2]``.
    """
    h1, h2 = _as_tensor(h1), _as_tensor(h2)
    _check_same_shape(h1, h2)
    _check_finite(h1, "h1")
    _check_finite(h2, "h2")
    # log-space: log p, log(1-p) come from logsigmoid and never hit log(0)
    log_p, log_np = torch.nn.functional.logsigmoid(h1), torch.nn.functional.logsigmoid(-h1)
    log_q, log_nq = torch.nn.functional.logsigmoid(h2), torch.nn.functional.logsigmoid(-h2)
    log_m = torch.logaddexp(log_p, log_q) - LN2
    log_nm = torch.logaddexp(log_np, log_nq) - LN2
    kl_pm = log_p.exp() * (log_p - log_m) + log_np.exp() * (log_np - log_nm)
    kl_qm = log_q.exp() * (log_q - log_m) + log_nq.exp() * (log_nq - log_nm)
    per_dim = (0.5 * (kl_pm + kl_qm)).clamp(0.0, LN2)
    # logaddexp(x, x) - ln2 can miss x by an ulp; equal logits are exactly 0
    per_dim = torch.where(h1 == h2, torch.zeros_like(per_dim), per_dim)
    return per_dim.mean(dim=-1)


def mse_alignment(h1, h2) -> torch.Tensor:
    """Mean squared difference over the last axis (ablation stand-in for JSD)."""
    h1, h2 = _as_tensor(h1), _as_tensor(h2)
    _check_same_shape(h1, h2)
    return (h1 - h2).pow(2).mean(dim=-1)


def orthogonality_penalty(h1, h2) -> torch.Tensor:
    """Absolute cosine similarity; ``ORTH_EPS`` guards zero-norm inputs."""
    h1, h2 = _as_tensor(h1), _as_tensor(h2)
    _check_same_shape(h1, h2)
    dot = (h1 * h2).sum(dim=-1)
    norms = torch.linalg.vector_norm(h1, dim=-1) * torch.linalg.vector_norm(h2, dim=-1)
    return dot.abs() / (norms + ORTH_EPS)


def masked_scaled_attention(scores, mask, d: int) -> torch.Tensor:
    """``softmax((scores + mask) / sqrt(d))`` over the last axis.

    ``mask`` is additive with entries in ``{0, -inf}``; masked positions come
    out exactly zero.  At least one entry per row must stay unmasked.
    """
    scores, mask = _as_tensor(scores), _as_tensor(mask).to(dtype=_as_tensor(scores).dtype)
    if d <= 0:
        raise InvalidConfigError("d must be a positive integer")
    _check_finite(scores, "scores")
    if scores.shape[-1] != mask.shape[-1]:
        raise ShapeError("scores and mask disagree on the last axis")
    valid = (mask == 0) | (mask == -math.inf)
    if not bool(valid.all()):
        raise InvalidMaskError("mask entries must be 0 or -inf")
    if bool((mask == -math.inf).all(dim=-1).any()):
        raise InvalidMaskError("every entry of a row is masked")
    return torch.softmax((scores + mask) / math.sqrt(d), dim=-1)


def margin_rank_attn_loss(alpha, aux_losses, epsilon: float) -> torch.Tensor:
    """Hinge loss asking attention weights to follow auxiliary-loss order.

    ``alpha`` and ``aux_losses`` have shape ``(..., C, R)``.  For every ordered
    pair (i, j) with ``aux[i] < aux[j]`` (strictly), the term
    ``max(0, alpha[j] - alpha[i] + epsilon)`` is charged; other pairs cost
    nothing.  ``aux_losses`` is detached.  The sum is divided by ``2C``.
    """
    alpha, aux = _as_tensor(alpha), _as_tensor(aux_losses).detach()
    if epsilon < 0:
        raise InvalidConfigError("epsilon must be non-negative")
    _check_same_shape(alpha, aux)
    # active[..., c, i, j] = aux_i < aux_j
    active = (aux.unsqueeze(-1) < aux.unsqueeze(-2)).to(alpha.dtype)
    gap = alpha.unsqueeze(-2) - alpha.unsqueeze(-1) + epsilon  # alpha_j - alpha_i + eps
    hinge = torch.clamp(gap, min=0.0) * active
    n_classes = alpha.shape[-2]
    return hinge.sum(dim=(-1, -2, -3)) / (2 * n_classes)


def binary_cross_entropy(y, y_hat) -> torch.Tensor:
    """Per-class negative log-likelihood with ``y_hat`` clamped away from 0 and 1."""
    y_hat = _as_tensor(y_hat)
    y = _as_tensor(y).to(dtype=y_hat.dtype)
    _check_same_shape(y, y_hat)
    p = y_hat.clamp(P_MIN, 1.0 - P_MIN)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
