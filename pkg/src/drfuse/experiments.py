"""Training orchestration shared by the CLI and the experiment scripts:
model construction, ablation variants and the internal baselines."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch

from .baselines import ConcatFusion, EhrOnly, ImageOnly
from .data import Dataset, Splits, ehr_statistics, to_batch
from .evaluation import MetricReport, attention_agreement, disentanglement_probe, evaluate_model
from .fusion import DrFuse, ModelConfig
from .training import FitResult, TrainConfig, compute_loss, fit, prediction_only_loss

log = logging.getLogger(__name__)

MODELS = {cls.kind: cls for cls in (DrFuse, EhrOnly, ImageOnly, ConcatFusion)}

ABLATIONS = ("full", "w/o disentangled", "MSE alignment", "w/o attn ranking")


def desk_scale_configs(n_features: int = 17, n_classes: int = 8, seed: int = 0,
                       **train_overrides) -> tuple[ModelConfig, TrainConfig]:
    """Model and training settings used for the synthetic experiments.

    Smaller than the defaults (d=32) and trained at lr=1e-3 with patience 5
    so a 5000-sample run takes about a minute on one CPU core.
    """
    model = ModelConfig(n_features=n_features, n_classes=n_classes, d=32, n_heads=4, ff_dim=64,
                        conv_channels=(8, 16, 32))
    train = TrainConfig(**{"lr": 1e-3, "max_epochs": 30, "patience": 5, "seed": seed, **train_overrides})
    return model, train


def ablation_variant(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Model and training configs for one ablation row."""
    if name == "full":
        return model_cfg, train_cfg
    if name == "w/o disentangled":
        return model_cfg, dataclasses.replace(train_cfg, lambda1=0.0, lambda2=0.0)
    if name == "MSE alignment":
        return (dataclasses.replace(model_cfg, pooling="mean"),
                dataclasses.replace(train_cfg, alignment="mse"))
    if name == "w/o attn ranking":
        return model_cfg, dataclasses.replace(train_cfg, attn_ranking=False)
    raise KeyError(f"unknown ablation variant {name!r}; choose from {ABLATIONS}")


def build_model(kind: str, model_cfg: ModelConfig, seed: int, train_data: Dataset | None = None,
                dtype: torch.dtype = torch.float32) -> torch.nn.Module:
    torch.manual_seed(seed)
    model = MODELS[kind](model_cfg).to(dtype)
    if train_data is not None and hasattr(model, "ehr_encoder"):
        model.ehr_encoder.set_normalization(*ehr_statistics(train_data))
    return model


@dataclass
class TrainedModel:
    kind: str
    model: torch.nn.Module
    fit: FitResult
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    seconds: float


def train_model(kind: str, splits: Splits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                train_on: str = "full", log_path=None) -> TrainedModel:
    """Build and fit one model.

    ``train_on="matched"`` restricts train and validation data to CXR-present
    samples.  The image-only baseline always uses the matched subset and no
    modality dropout.
    """
    if kind == "image_only":
        train_on = "matched"
        train_cfg = dataclasses.replace(train_cfg, modality_dropout=0.0)
    data = splits.matched() if train_on == "matched" else splits
    model = build_model(kind, model_cfg, train_cfg.seed, data.train)
    loss_fn = compute_loss if kind == "drfuse" else prediction_only_loss
    start = time.perf_counter()
    result = fit(model, to_batch(data.train), to_batch(data.val) if len(data.val) else None,
                 train_cfg, loss_fn=loss_fn, log_path=log_path)
    seconds = time.perf_counter() - start
    log.info("%s trained on %s: %d epochs, best val %.4f (%.1fs)", kind, train_on, result.epochs_run,
             result.best_val_prauc, seconds)
    return TrainedModel(kind, model, result, model_cfg, train_cfg, seconds)


def heldout_batches(splits: Splits, image_shape=None) -> dict[str, "object"]:
    full = to_batch(splits.test, image_shape=image_shape)
    return {"full": full, "matched": full.matched()}


def evaluate_trained(trained: TrainedModel, splits: Splits, n_boot: int = 1000, seed: int = 0,
                     with_probe: bool = False) -> dict[str, MetricReport]:
    """Reports on the full and the matched test split."""
    reports = {}
    for subset, batch in heldout_batches(splits).items():
        if len(batch) == 0:
            continue
        if trained.kind == "image_only" and subset == "full":
            continue
        report, outputs = evaluate_model(trained.model, batch, subset, n_boot, seed=seed)
        if trained.kind == "drfuse":
            report.extra["attention_agreement"] = attention_agreement(outputs, batch.labels.numpy())
            if with_probe and splits.test.has_factors:
                data = splits.test if subset == "full" else splits.test.matched()
                factors = {f: np.stack([r.factors[f] for r in data]) for f in ("shared", "ehr", "cxr")}
                report.probe = disentanglement_probe(trained.model, batch, factors, seed=seed)
        reports[subset] = report
    return reports


def run_ablations(splits: Splits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  train_on: str = "matched", n_boot: int = 1000, variants=ABLATIONS,
                  with_probe: bool = False) -> dict[str, dict[str, MetricReport]]:
    """Train and evaluate each ablation variant on identical splits and seeds."""
    results = {}
    for name in variants:
        m_cfg, t_cfg = ablation_variant(name, model_cfg, train_cfg)
        trained = train_model("drfuse", splits, m_cfg, t_cfg, train_on)
        results[name] = evaluate_trained(trained, splits, n_boot, train_cfg.seed, with_probe)
    return results


def internal_baselines(splits: Splits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                       n_boot: int = 1000, kinds=("ehr_only", "image_only", "concat")
                       ) -> dict[str, dict[str, MetricReport]]:
    return {
        kind: evaluate_trained(train_model(kind, splits, model_cfg, train_cfg), splits, n_boot,
                               train_cfg.seed)
        for kind in kinds
    }
