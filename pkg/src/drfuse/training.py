"""Composite objective, modality-dropout augmentation, training loop, checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from . import kernels as K
from .data import Batch
from .errors import InvalidConfigError, InvalidInputError, TrainingDivergenceError
from .metrics import macro_prauc

log = logging.getLogger(__name__)

TERMS = ("pred", "jsd", "orth_ehr", "orth_cxr", "attn", "aux")


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    epsilon: float = 0.1
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    modality_dropout: float = 0.3
    seed: int = 0
    alignment: str = "jsd"  # or "mse"
    attn_ranking: bool = True
    grad_clip: float = 5.0
    class_reduction: str = "mean"  # how pred/aux combine over classes
    jsd_reduction: str = "mean"  # how the alignment term combines over dimensions

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "epsilon", "grad_clip"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise InvalidConfigError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise InvalidConfigError("batch_size, patience must be >= 1 and max_epochs >= 0")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise InvalidConfigError("modality_dropout must lie in [0, 1]")
        if self.alignment not in ("jsd", "mse"):
            raise InvalidConfigError("alignment must be 'jsd' or 'mse'")
        if self.class_reduction not in ("sum", "mean") or self.jsd_reduction not in ("sum", "mean"):
            raise InvalidConfigError("reductions must be 'sum' or 'mean'")


@dataclass
class LossBreakdown:
    """Batch means of each objective term.  ``jsd`` holds the alignment term."""

    pred: torch.Tensor
    jsd: torch.Tensor
    orth_ehr: torch.Tensor
    orth_cxr: torch.Tensor
    attn: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_terms(cls, config: TrainConfig, **terms) -> "LossBreakdown":
        """Combine term values with the configured weights."""
        t = {k: torch.as_tensor(terms.get(k, 0.0), dtype=torch.float64) for k in TERMS}
        attn = t["attn"] if config.attn_ranking else torch.zeros_like(t["attn"])
        total = (t["pred"] + config.lambda1 * t["jsd"] + config.lambda2 * (t["orth_ehr"] + t["orth_cxr"])
                 + config.lambda3 * (attn + t["aux"]))
        return cls(**t, total=total)

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in (*TERMS, "total")}


def _check_finite(terms: dict[str, torch.Tensor]) -> None:
    for name, value in terms.items():
        if not bool(torch.isfinite(value).all()):
            raise TrainingDivergenceError(name)


def per_sample_terms(batch: Batch, out, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Each objective term per sample; CXR terms are exactly 0 for partial samples."""
    reps, fus = out.reps, out.fusion
    y = batch.labels.to(fus.y_hat.dtype)
    has = reps.has_cxr
    zero = torch.zeros(has.shape, dtype=y.dtype, device=y.device)

    n_classes = y.shape[-1]
    class_scale = 1.0 if config.class_reduction == "sum" else 1.0 / n_classes
    dim_scale = reps.h_shared_ehr.shape[-1] if config.jsd_reduction == "sum" else 1.0

    pred = K.binary_cross_entropy(y, fus.y_hat).sum(-1) * class_scale
    if config.alignment == "jsd":
        align = K.jsd_from_logits(reps.h_shared_ehr, reps.h_shared_cxr) * dim_scale
    else:
        align = K.mse_alignment(reps.h_shared_ehr, reps.h_shared_cxr) * dim_scale
    orth_ehr = K.orthogonality_penalty(reps.h_shared_ehr, reps.h_distinct_ehr)
    orth_cxr = K.orthogonality_penalty(reps.h_shared_cxr, reps.h_distinct_cxr)
    aux_losses = K.binary_cross_entropy(y[:, None, :].expand_as(fus.y_aux), fus.y_aux)  # (N, 3, C)
    aux = aux_losses.sum(dim=(-1, -2)) * class_scale
    attn = K.margin_rank_attn_loss(fus.alpha, aux_losses.transpose(1, 2), config.epsilon)
    return {
        "pred": pred,
        "jsd": torch.where(has, align, zero),
        "orth_ehr": orth_ehr,
        "orth_cxr": torch.where(has, orth_cxr, zero),
        "attn": torch.where(has, attn, zero) if config.attn_ranking else zero,
        "aux": torch.where(has, aux, zero),
    }


def compute_loss(batch: Batch, out, config: TrainConfig) -> LossBreakdown:
    """Batch objective: the per-sample loss averaged over every sample.

    Paired samples contribute all terms; partial (EHR-only) samples contribute
    only the prediction loss and the EHR orthogonality term.
    """
    terms = {k: v.mean() for k, v in per_sample_terms(batch, out, config).items()}
    _check_finite(terms)
    total = (terms["pred"] + config.lambda1 * terms["jsd"]
             + config.lambda2 * (terms["orth_ehr"] + terms["orth_cxr"])
             + config.lambda3 * (terms["attn"] + terms["aux"]))
    return LossBreakdown(**terms, total=total)


def prediction_only_loss(batch: Batch, out, config: TrainConfig) -> LossBreakdown:
    """Objective for baselines: per-class cross-entropy, nothing else."""
    y = batch.labels.to(out.y_hat.dtype)
    pred = K.binary_cross_entropy(y, out.y_hat).sum(-1)
    if config.class_reduction == "mean":
        pred = pred / y.shape[-1]
    pred = pred.mean()
    _check_finite({"pred": pred})
    zero = torch.zeros_like(pred)
    return LossBreakdown(pred, zero, zero, zero, zero, zero, pred)


def apply_modality_dropout(batch: Batch, rate: float, rng: np.random.Generator) -> Batch:
    """Mark each CXR-bearing sample absent with probability ``rate``.

    One uniform draw is consumed per sample regardless of modality, so the
    random stream does not depend on which samples carry images.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidConfigError("dropout rate must lie in [0, 1]")
    u = rng.random(len(batch))
    if rate == 0.0:
        return batch
    drop = torch.as_tensor(u < rate) & batch.has_cxr
    if not bool(drop.any()):
        return batch
    keep = ~drop
    cxr = batch.cxr * keep.to(batch.cxr.dtype).view(-1, *([1] * (batch.cxr.ndim - 1)))
    return dataclasses.replace(batch, cxr=cxr, has_cxr=batch.has_cxr & keep)


@torch.no_grad()
def predict(model: torch.nn.Module, batch: Batch, batch_size: int = 512) -> dict[str, np.ndarray]:
    """Run ``model`` in eval mode and gather outputs as numpy arrays."""
    was_training = model.training
    model.eval()
    chunks: dict[str, list] = {}
    for start in range(0, len(batch), batch_size):
        out = model(batch.index(range(start, min(start + batch_size, len(batch)))))
        for k, v in output_arrays(out).items():
            chunks.setdefault(k, []).append(v)
    model.train(was_training)
    return {k: np.concatenate(v) for k, v in chunks.items()}


def output_arrays(out) -> dict[str, np.ndarray]:
    arrays = {"y_hat": out.y_hat}
    if hasattr(out, "fusion"):
        f, r = out.fusion, out.reps
        arrays.update(alpha=f.alpha, y_aux=f.y_aux, h_shared=f.h_shared,
                      h_shared_ehr=r.h_shared_ehr, h_distinct_ehr=r.h_distinct_ehr,
                      h_shared_cxr=r.h_shared_cxr, h_distinct_cxr=r.h_distinct_cxr,
                      has_cxr=r.has_cxr)
    return {k: v.detach().cpu().numpy() for k, v in arrays.items()}


@dataclass
class FitResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_prauc: float = -math.inf
    epochs_run: int = 0


def fit(
    model: torch.nn.Module,
    train: Batch,
    val: Batch | None,
    config: TrainConfig,
    loss_fn: Callable[[Batch, object, TrainConfig], LossBreakdown] = compute_loss,
    log_path: str | Path | None = None,
    on_epoch_end: Callable[[int, torch.nn.Module], None] | None = None,
) -> FitResult:
    """Adam training with modality dropout, clipping and early stopping.

    After every epoch the validation macro PRAUC is computed; the best
    parameters are restored into ``model`` at the end.  With an empty or
    missing validation set the final epoch is kept.
    """
    if len(train) == 0:
        raise InvalidInputError("training set is empty")
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    result = FitResult()
    best_state = None
    stale = 0
    sink = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(record: dict) -> None:
        result.log.append(record)
        if sink:
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            sink.flush()

    try:
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            sums = dict.fromkeys((*TERMS, "total"), 0.0)
            order = rng.permutation(len(train))
            for start in range(0, len(train), config.batch_size):
                batch = train.index(order[start:start + config.batch_size])
                batch = apply_modality_dropout(batch, config.modality_dropout, rng)
                try:
                    losses = loss_fn(batch, model(batch), config)
                except TrainingDivergenceError as exc:
                    exc.epoch = epoch
                    emit({"epoch": epoch, "split": "train", "error": str(exc)})
                    raise
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                for k, v in losses.as_dict().items():
                    sums[k] += v * len(batch)
            emit({"epoch": epoch, "split": "train", **{k: v / len(train) for k, v in sums.items()}})
            result.epochs_run = epoch
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)

            if val is None or len(val) == 0:
                best_state = None
                result.best_epoch = epoch
                continue
            val_record = evaluate_split(model, val, config, loss_fn)
            emit({"epoch": epoch, "split": "val", **val_record})
            score = val_record["macro_prauc"]
            if score > result.best_val_prauc:
                result.best_val_prauc, result.best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if sink:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


@torch.no_grad()
def evaluate_split(model, data: Batch, config: TrainConfig, loss_fn=compute_loss,
                   batch_size: int = 512) -> dict[str, float]:
    """Loss components (sample-weighted) and macro PRAUC on ``data``, eval mode."""
    model.eval()
    sums = dict.fromkeys((*TERMS, "total"), 0.0)
    preds = []
    for start in range(0, len(data), batch_size):
        batch = data.index(range(start, min(start + batch_size, len(data))))
        out = model(batch)
        for k, v in loss_fn(batch, out, config).as_dict().items():
            sums[k] += v * len(batch)
        preds.append(out.y_hat.cpu().numpy())
    record = {k: v / len(data) for k, v in sums.items()}
    result = macro_prauc(np.concatenate(preds), data.labels.cpu().numpy(), warn=False)
    record["macro_prauc"] = result.macro if not math.isnan(result.macro) else 0.0
    return record


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: torch.nn.Module, metadata: dict) -> None:
    """Write every parameter and buffer (keyed by module path) plus JSON metadata."""
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"drfuse": json.dumps(metadata, sort_keys=True)}
    save_file(state, str(path), metadata=meta)


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    from safetensors import safe_open

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads(fh.metadata()["drfuse"])
    return load_file(str(path)), meta
