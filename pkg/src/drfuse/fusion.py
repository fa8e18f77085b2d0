"""Disease-aware masked attention fusion and the assembled DrFuse model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import kernels as K
from .data import Batch
from .encoders import EhrEncoder, ImageEncoder
from .errors import InvalidConfigError, InvalidInputError

# row order of the representation stack H
ROW_NAMES = ("distinct_ehr", "shared", "distinct_cxr")


@dataclass
class RepresentationBundle:
    """Batched disentangled representations; CXR rows are zero where absent."""

    h_shared_ehr: torch.Tensor  # (N, d)
    h_distinct_ehr: torch.Tensor
    h_shared_cxr: torch.Tensor
    h_distinct_cxr: torch.Tensor
    has_cxr: torch.Tensor  # (N,) bool

    def __post_init__(self):
        shapes = {t.shape for t in (self.h_shared_ehr, self.h_distinct_ehr,
                                    self.h_shared_cxr, self.h_distinct_cxr)}
        if len(shapes) != 1 or self.h_shared_ehr.ndim != 2:
            raise InvalidInputError(f"representations must share one (N, d) shape, got {shapes}")
        if self.has_cxr.shape != self.h_shared_ehr.shape[:1]:
            raise InvalidInputError("has_cxr must have one flag per sample")

    @classmethod
    def single(cls, h_shared_ehr, h_distinct_ehr, h_shared_cxr=None, h_distinct_cxr=None):
        """Bundle one sample; pass ``None`` for both CXR vectors when absent."""
        if (h_shared_cxr is None) != (h_distinct_cxr is None):
            raise InvalidInputError("CXR representations must be both present or both absent")
        has = h_shared_cxr is not None
        zeros = torch.zeros_like(h_shared_ehr)
        return cls(h_shared_ehr[None], h_distinct_ehr[None],
                   (h_shared_cxr if has else zeros)[None], (h_distinct_cxr if has else zeros)[None],
                   torch.tensor([has]))

    @property
    def d(self) -> int:
        return self.h_shared_ehr.shape[-1]


@dataclass
class FusionOutput:
    h_shared: torch.Tensor  # (N, d)
    H: torch.Tensor  # (N, 3, d)
    alpha: torch.Tensor  # (N, C, 3)
    h_tilde: torch.Tensor  # (N, C, d)
    y_hat: torch.Tensor  # (N, C)
    y_aux: torch.Tensor  # (N, 3, C)
    aux_mask: torch.Tensor  # (N, 3) bool, False where the auxiliary prediction is excluded


def pool_shared(bundle: RepresentationBundle, mode: str = "logit") -> torch.Tensor:
    """Logit-pool the two shared vectors where CXR exists, else keep the EHR one."""
    if mode == "logit":
        pooled = K.logit_pool(bundle.h_shared_ehr, bundle.h_shared_cxr)
    elif mode == "mean":
        pooled = K.mean_pool(bundle.h_shared_ehr, bundle.h_shared_cxr)
    else:
        raise InvalidConfigError(f"unknown pooling mode {mode!r}")
    return torch.where(bundle.has_cxr[:, None], pooled, bundle.h_shared_ehr)


def stack_representations(bundle: RepresentationBundle, h_shared: torch.Tensor) -> torch.Tensor:
    cxr = torch.where(bundle.has_cxr[:, None], bundle.h_distinct_cxr,
                      torch.zeros_like(bundle.h_distinct_cxr))
    return torch.stack([bundle.h_distinct_ehr, h_shared, cxr], dim=1)


def build_query(bundle: RepresentationBundle, h_shared: torch.Tensor, W_Q: torch.Tensor) -> torch.Tensor:
    """Average of the available representations, projected by ``W_Q``."""
    two = (bundle.h_distinct_ehr + h_shared) / 2
    three = (bundle.h_distinct_ehr + h_shared + bundle.h_distinct_cxr) / 3
    return torch.where(bundle.has_cxr[:, None], three, two) @ W_Q


def attention_mask(has_cxr: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Additive mask of shape (N, 1, 3): 0 where visible, -inf on absent CXR."""
    mask = torch.zeros(has_cxr.shape[0], 1, 3, dtype=dtype, device=has_cxr.device)
    mask[:, 0, 2] = torch.where(has_cxr, 0.0, -math.inf).to(dtype)
    return mask


class DiseaseAwareFusion(nn.Module):
    """Per-class attention over [h_distinct_ehr; h_shared; h_distinct_cxr].

    Holds the query, per-class key and value projections, the per-class
    prediction heads and the three auxiliary classifiers.
    """

    def __init__(self, d: int, n_classes: int):
        super().__init__()
        if n_classes < 1:
            raise InvalidConfigError("need at least one class")
        self.d, self.n_classes = d, n_classes
        scale = 1 / math.sqrt(d)
        self.W_Q = nn.Parameter(torch.randn(d, d) * scale)
        self.W_K = nn.Parameter(torch.randn(n_classes, d, d) * scale)
        self.W_V = nn.Parameter(torch.randn(d, d) * scale)
        self.head_weight = nn.Parameter(torch.randn(n_classes, d) * scale)
        self.head_bias = nn.Parameter(torch.zeros(n_classes))
        hidden = max(1, d // 2)
        self.aux_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, n_classes)) for _ in range(3)
        )

    def attend(self, bundle: RepresentationBundle, h_shared: torch.Tensor):
        H = stack_representations(bundle, h_shared)
        q = build_query(bundle, h_shared, self.W_Q)
        keys = torch.einsum("nrd,cde->ncre", H, self.W_K)  # (N, C, 3, d)
        scores = torch.einsum("nd,ncrd->ncr", q, keys)
        alpha = K.masked_scaled_attention(scores, attention_mask(bundle.has_cxr, scores.dtype), self.d)
        h_tilde = torch.einsum("ncr,nrd->ncd", alpha, H @ self.W_V)
        return H, alpha, h_tilde

    def aux_predict(self, bundle: RepresentationBundle, h_shared: torch.Tensor):
        """Auxiliary predictions (N, 3, C) and the mask of rows that count."""
        inputs = (bundle.h_distinct_ehr, h_shared, bundle.h_distinct_cxr)
        y_aux = torch.stack([torch.sigmoid(g(h)) for g, h in zip(self.aux_heads, inputs)], dim=1)
        has = bundle.has_cxr
        y_aux = torch.cat([y_aux[:, :2], torch.where(has[:, None, None], y_aux[:, 2:], 0.5)], dim=1)
        aux_mask = torch.stack([torch.ones_like(has), torch.ones_like(has), has], dim=1)
        return y_aux, aux_mask

    def forward(self, bundle: RepresentationBundle, h_shared: torch.Tensor) -> FusionOutput:
        H, alpha, h_tilde = self.attend(bundle, h_shared)
        y_hat = torch.sigmoid((h_tilde * self.head_weight).sum(-1) + self.head_bias)
        y_aux, aux_mask = self.aux_predict(bundle, h_shared)
        return FusionOutput(h_shared, H, alpha, h_tilde, y_hat, y_aux, aux_mask)


def fuse(bundle: RepresentationBundle, params: DiseaseAwareFusion, pooling: str = "logit") -> FusionOutput:
    return params(bundle, pool_shared(bundle, pooling))


def aux_predict(bundle: RepresentationBundle, h_shared: torch.Tensor, params: DiseaseAwareFusion):
    return params.aux_predict(bundle, h_shared)


@dataclass
class ModelConfig:
    n_features: int = 17
    n_classes: int = 8
    d: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    max_len: int = 512
    dropout: float = 0.0
    image_channels: int = 1
    conv_channels: tuple[int, ...] = (16, 32, 64)
    pooling: str = "logit"

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.pooling not in ("logit", "mean"):
            raise InvalidConfigError(f"pooling must be 'logit' or 'mean', got {self.pooling!r}")
        if self.d % 2 or self.d % self.n_heads:
            raise InvalidConfigError("d must be even and divisible by n_heads")
        if self.n_classes < 1 or self.n_features < 1:
            raise InvalidConfigError("n_classes and n_features must be >= 1")


@dataclass
class ModelOutput:
    reps: RepresentationBundle
    fusion: FusionOutput

    @property
    def y_hat(self) -> torch.Tensor:
        return self.fusion.y_hat


class DrFuse(nn.Module):
    """EHR + image encoders feeding the disease-aware fusion module."""

    kind = "drfuse"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.ehr_encoder = EhrEncoder(config.n_features, config.d, config.n_heads, config.ff_dim,
                                      config.max_len, config.dropout)
        self.image_encoder = ImageEncoder(config.d, config.image_channels, config.conv_channels)
        self.fusion = DiseaseAwareFusion(config.d, config.n_classes)

    def encode(self, batch: Batch) -> RepresentationBundle:
        s_ehr, d_ehr = self.ehr_encoder(batch.ehr, batch.ehr_mask)
        s_cxr, d_cxr = self.image_encoder(batch.cxr, batch.has_cxr)
        return RepresentationBundle(s_ehr, d_ehr, s_cxr, d_cxr, batch.has_cxr)

    def forward(self, batch: Batch) -> ModelOutput:
        reps = self.encode(batch)
        return ModelOutput(reps, fuse(reps, self.fusion, self.config.pooling))
