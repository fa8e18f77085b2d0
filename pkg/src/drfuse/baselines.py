"""Internal comparison models: EHR-only, image-only and naive concatenation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import Batch
from .encoders import EhrEncoder, ImageEncoder
from .fusion import ModelConfig


@dataclass
class PredictionOutput:
    y_hat: torch.Tensor  # (N, C)


class EhrOnly(nn.Module):
    """The EHR Transformer with a linear head; never reads the image field."""

    kind = "ehr_only"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.ehr_encoder = EhrEncoder(config.n_features, config.d, config.n_heads, config.ff_dim,
                                      config.max_len, config.dropout)
        self.head = nn.Linear(2 * config.d, config.n_classes)

    def forward(self, batch: Batch) -> PredictionOutput:
        s, d = self.ehr_encoder(batch.ehr, batch.ehr_mask)
        return PredictionOutput(torch.sigmoid(self.head(torch.cat([s, d], -1))))


class ImageOnly(nn.Module):
    """Conv encoder with a linear head.  Meant for the paired subset."""

    kind = "image_only"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config.d, config.image_channels, config.conv_channels)
        self.head = nn.Linear(2 * config.d, config.n_classes)

    def forward(self, batch: Batch) -> PredictionOutput:
        s, d = self.image_encoder(batch.cxr, batch.has_cxr)
        return PredictionOutput(torch.sigmoid(self.head(torch.cat([s, d], -1))))


class ConcatFusion(nn.Module):
    """Concatenate both encoders' outputs; a missing image contributes zeros."""

    kind = "concat"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.ehr_encoder = EhrEncoder(config.n_features, config.d, config.n_heads, config.ff_dim,
                                      config.max_len, config.dropout)
        self.image_encoder = ImageEncoder(config.d, config.image_channels, config.conv_channels)
        self.head = nn.Sequential(nn.Linear(4 * config.d, config.d), nn.ReLU(),
                                  nn.Linear(config.d, config.n_classes))

    def forward(self, batch: Batch) -> PredictionOutput:
        es, ed = self.ehr_encoder(batch.ehr, batch.ehr_mask)
        cs, cd = self.image_encoder(batch.cxr, batch.has_cxr)
        return PredictionOutput(torch.sigmoid(self.head(torch.cat([es, ed, cs, cd], -1))))
