"""Modality-specific encoders.

Each encoder maps one modality to a pair of d-dimensional vectors, a
*shared* representation and a *distinct* one.  The EHR encoder is a small
Transformer whose embedding and first layer are shared by both branches;
the image encoder is a strided conv trunk with two linear heads.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidConfigError, InvalidInputError


def positional_encoding(T: int, d_model: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal table of shape (T, d_model).

    Column 2k holds ``sin(t / 10000^(2k/d_model))`` and column 2k+1 the cosine.
    """
    if d_model % 2:
        raise InvalidConfigError(f"d_model must be even, got {d_model}")
    if T < 1:
        raise InvalidConfigError(f"T must be >= 1, got {T}")
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    table = torch.zeros(T, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer: self-attention then a feed-forward block."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise InvalidConfigError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(n, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)  # (n, h, t, t)
        scores = scores.masked_fill(~mask[:, None, None, :], -math.inf)
        attn = self.drop(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(n, t, d)
        x = x + self.drop(self.out(ctx))
        return x + self.drop(self.ff(self.norm2(x)))


class EhrEncoder(nn.Module):
    """Transformer encoder for (T, J) clinical time series.

    The input projection and first layer are one module used by both the
    shared and the distinct branch, so their gradients sum over branches.
    Sequences are z-scored with stored per-feature statistics, then mean
    pooled over real (unpadded) time steps.
    """

    def __init__(self, n_features: int, d: int = 64, n_heads: int = 4, ff_dim: int = 128,
                 max_len: int = 512, dropout: float = 0.0, use_positional: bool = True):
        super().__init__()
        self.n_features = n_features
        self.d = d
        self.max_len = max_len
        self.use_positional = use_positional
        self.embed = nn.Linear(n_features, d)
        self.first = TransformerLayer(d, n_heads, ff_dim, dropout)
        self.shared_upper = TransformerLayer(d, n_heads, ff_dim, dropout)
        self.distinct_upper = TransformerLayer(d, n_heads, ff_dim, dropout)
        self.shared_head = nn.Linear(d, d)
        self.distinct_head = nn.Linear(d, d)
        self.register_buffer("pe", positional_encoding(max_len, d))
        self.register_buffer("feature_mean", torch.zeros(n_features))
        self.register_buffer("feature_std", torch.ones(n_features))

    def set_normalization(self, mean, std) -> None:
        self.feature_mean.copy_(torch.as_tensor(np.asarray(mean)))
        self.feature_std.copy_(torch.as_tensor(np.asarray(std)))

    @staticmethod
    def _pool(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        w = mask.to(x.dtype).unsqueeze(-1)
        return (x * w).sum(1) / w.sum(1)

    def trunk(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.n_features:
            raise InvalidInputError(f"expected (N, T, {self.n_features}) input, got {tuple(x.shape)}")
        if x.shape[1] == 0:
            raise InvalidInputError("sequence has no time steps")
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        if x.shape[1] > self.max_len:
            x, mask = x[:, : self.max_len], mask[:, : self.max_len]
        if not bool(torch.isfinite(x).all()):
            raise InvalidInputError("EHR input contains non-finite values")
        x = (x - self.feature_mean) / self.feature_std
        h = self.embed(x)
        if self.use_positional:
            h = h + self.pe[: h.shape[1]]
        return self.first(h, mask), mask

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        h, mask = self.trunk(x, mask)
        shared = self.shared_head(self._pool(self.shared_upper(h, mask), mask))
        distinct = self.distinct_head(self._pool(self.distinct_upper(h, mask), mask))
        return shared, distinct


class ConvTrunk(nn.Module):
    """Strided conv blocks followed by global average pooling."""

    def __init__(self, in_channels: int = 1, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        layers = []
        c_in = in_channels
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.GroupNorm(min(8, c), c), nn.ReLU()]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_dim = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(-1, -2))


class ImageEncoder(nn.Module):
    """One convolutional trunk, two linear heads (shared, distinct).

    ``backbone`` may be any module mapping (N, C, H, W) to (N, out_dim); the
    default is :class:`ConvTrunk`.
    """

    def __init__(self, d: int = 64, in_channels: int = 1, channels: tuple[int, ...] = (16, 32, 64),
                 backbone: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else ConvTrunk(in_channels, channels)
        out_dim = getattr(self.backbone, "out_dim", channels[-1])
        self.shared_head = nn.Linear(out_dim, d)
        self.distinct_head = nn.Linear(out_dim, d)
        self.d = d

    def forward(self, images: torch.Tensor, present: torch.Tensor | None = None):
        """Encode the rows flagged in ``present``; absent rows come back as zeros.

        Absent rows never pass through the backbone, so they add nothing to
        its gradient.
        """
        if images.ndim != 4:
            raise InvalidInputError(f"expected (N, C, H, W) images, got {tuple(images.shape)}")
        n = images.shape[0]
        if present is None:
            present = torch.ones(n, dtype=torch.bool, device=images.device)
        shared = images.new_zeros(n, self.d)
        distinct = images.new_zeros(n, self.d)
        idx = torch.nonzero(present).flatten()
        if idx.numel():
            x = images[idx]
            if not bool(torch.isfinite(x).all()):
                raise InvalidInputError("image input contains non-finite values")
            feats = self.backbone(x)
            shared = shared.index_copy(0, idx, self.shared_head(feats))
            distinct = distinct.index_copy(0, idx, self.distinct_head(feats))
        return shared, distinct


def encode_ehr(x, encoder: EhrEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode a single (T, J) sequence into (h_shared, h_distinct)."""
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x,
                        dtype=encoder.embed.weight.dtype)
    if x.ndim != 2:
        raise InvalidInputError(f"expected a (T, J) matrix, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise InvalidInputError("sequence has no time steps")
    shared, distinct = encoder(x[None])
    return shared[0], distinct[0]


def encode_image(x, encoder: ImageEncoder):
    """Encode one image; ``None`` (absent) passes straight through."""
    if x is None:
        return None
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x,
                        dtype=encoder.shared_head.weight.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise InvalidInputError(f"malformed image grid of shape {tuple(x.shape)}")
    if not bool(torch.isfinite(x).all()) or bool(((x < 0) | (x > 1)).any()):
        raise InvalidInputError("image intensities must be finite and within [0, 1]")
    shared, distinct = encoder(x[None])
    return shared[0], distinct[0]
