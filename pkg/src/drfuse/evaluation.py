"""Metric reports, attention export and the disentanglement probe."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.linear_model import Ridge
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold, cross_val_predict

from . import kernels as K
from .data import Batch
from .fusion import ROW_NAMES
from .metrics import bootstrap_ci, macro_prauc
from .training import predict

REPRESENTATIONS = ("h_shared_ehr", "h_distinct_ehr", "h_shared_cxr", "h_distinct_cxr")
FACTORS = ("shared", "ehr", "cxr")


@dataclass
class MetricReport:
    subset: str
    n_samples: int
    per_class: np.ndarray
    prevalence: np.ndarray
    macro: float
    ci: tuple[float, float]
    n_skipped: int
    alpha: np.ndarray | None = None
    probe: dict | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        row = {
            "subset": self.subset,
            "n_samples": self.n_samples,
            "macro_prauc": self.macro,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "n_classes_skipped": self.n_skipped,
        }
        row.update(self.extra)
        return row


def evaluate_predictions(scores, labels, subset: str = "full", n_boot: int = 1000,
                         level: float = 0.95, seed: int = 0) -> MetricReport:
    scores, labels = np.asarray(scores), np.asarray(labels)
    result = macro_prauc(scores, labels)
    ci = bootstrap_ci(scores, labels, n_iter=n_boot, level=level, seed=seed) if n_boot else (
        result.macro, result.macro)
    prevalence = labels.astype(np.float64).mean(axis=0)
    return MetricReport(subset, len(labels), result.per_class, prevalence, result.macro, ci, result.n_skipped)


def evaluate_model(model: torch.nn.Module, batch: Batch, subset: str = "full", n_boot: int = 1000,
                   level: float = 0.95, seed: int = 0) -> tuple[MetricReport, dict[str, np.ndarray]]:
    outputs = predict(model, batch)
    report = evaluate_predictions(outputs["y_hat"], batch.labels.numpy(), subset, n_boot, level, seed)
    report.alpha = outputs.get("alpha")
    return report, outputs


# -- attention export ----------------------------------------------------------------


def alpha_rows(ids, alpha: np.ndarray, has_cxr: np.ndarray) -> list[dict]:
    rows = []
    for i, sid in enumerate(ids):
        for c in range(alpha.shape[1]):
            row = {"id": sid, "class": c, "has_cxr": int(has_cxr[i])}
            row.update({f"alpha_{name}": float(alpha[i, c, r]) for r, name in enumerate(ROW_NAMES)})
            rows.append(row)
    return rows


def write_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(v):
    if isinstance(v, float):
        return None if math.isnan(v) else round(v, 10)
    return v


def per_class_rows(report: MetricReport) -> list[dict]:
    rows = [
        {"subset": report.subset, "class": str(c), "prevalence": _fmt(float(report.prevalence[c])),
         "prauc": _fmt(float(report.per_class[c]))}
        for c in range(len(report.per_class))
    ]
    rows.append({"subset": report.subset, "class": "macro", "prevalence": _fmt(float(report.prevalence.mean())),
                 "prauc": _fmt(report.macro)})
    return rows


def write_report(out_dir: str | Path, reports: list[MetricReport], extra: dict | None = None) -> None:
    """Per-class table (``per_class.csv``) and a summary document (``summary.json``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "per_class.csv", [row for r in reports for row in per_class_rows(r)])
    doc = {"reports": [{k: _fmt(v) for k, v in r.summary().items()} for r in reports]}
    for r in reports:
        if r.probe is not None:
            doc.setdefault("probe", {})[r.subset] = r.probe
    if extra:
        doc.update(extra)
    (out_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def relative_difference_rows(per_class: dict[str, np.ndarray], fused: list[str],
                             unimodal: list[str], prevalence=None) -> list[dict]:
    """Per-class PRAUC with ``(x%)`` relative difference against the best unimodal model."""
    n = len(next(iter(per_class.values())))
    rows = []
    for c in range(n):
        best = max(per_class[u][c] for u in unimodal)
        row = {"class": c}
        if prevalence is not None:
            row["prevalence"] = round(float(prevalence[c]), 4)
        for name in unimodal:
            row[name] = round(float(per_class[name][c]), 4)
        for name in fused:
            v = float(per_class[name][c])
            rel = (v - best) / best * 100 if best > 0 else math.nan
            row[name] = f"{v:.3f} ({rel:.1f}%)"
        rows.append(row)
    return rows


# -- disentanglement probe ---------------------------------------------------------------


def _probe_r2(x: np.ndarray, y: np.ndarray, seed: int, ridge: float) -> float:
    folds = KFold(5, shuffle=True, random_state=seed)
    pred = cross_val_predict(Ridge(alpha=ridge), x, y, cv=folds)
    return float(r2_score(y, pred, multioutput="uniform_average"))


def disentanglement_probe(model: torch.nn.Module, batch: Batch, factors: dict[str, np.ndarray],
                          seed: int = 0, ridge: float = 1.0) -> dict:
    """Held-out R^2 of ridge probes from each representation to each latent factor.

    Returns the 4 x 3 R^2 matrix, the same with shuffled factor rows as a
    control, the R^2 of the pooled shared vector, and the mean JSD between
    the two shared representations over CXR-present samples.
    """
    out = predict(model, batch)
    has = out["has_cxr"].astype(bool)
    rng = np.random.default_rng(seed)
    r2, control = {}, {}
    for rep in REPRESENTATIONS:
        rows = has if rep.endswith("cxr") else np.ones_like(has)
        x = out[rep][rows]
        r2[rep], control[rep] = {}, {}
        for f in FACTORS:
            y = np.asarray(factors[f])[rows]
            if len(x) < 10:
                r2[rep][f] = control[rep][f] = math.nan
                continue
            r2[rep][f] = _probe_r2(x, y, seed, ridge)
            control[rep][f] = _probe_r2(x, y[rng.permutation(len(y))], seed, ridge)
    pooled = {f: _probe_r2(out["h_shared"], np.asarray(factors[f]), seed, ridge) for f in FACTORS}
    jsd = math.nan
    if has.any():
        jsd = float(K.jsd_from_logits(torch.from_numpy(out["h_shared_ehr"][has]).double(),
                                      torch.from_numpy(out["h_shared_cxr"][has]).double()).mean())
    return {"r2": r2, "control": control, "r2_pooled_shared": pooled, "mean_jsd": jsd}


def projection_rows(outputs: dict[str, np.ndarray], ids, seed: int = 0) -> list[dict]:
    """Joint 2-D PCA of the four representations, for visual inspection only."""
    has = outputs["has_cxr"].astype(bool)
    blocks, rows = [], []
    for rep in REPRESENTATIONS:
        keep = has if rep.endswith("cxr") else np.ones_like(has)
        blocks.append(outputs[rep][keep])
        rows += [{"id": sid, "representation": rep} for sid, k in zip(ids, keep) if k]
    stacked = np.concatenate(blocks)
    if len(stacked) < 2:
        return []
    xy = PCA(n_components=2, random_state=seed).fit_transform(stacked)
    for row, (x, y) in zip(rows, xy):
        row.update(x=round(float(x), 6), y=round(float(y), 6))
    return rows


def attention_agreement(outputs: dict[str, np.ndarray], labels: np.ndarray) -> float:
    """Fraction of (sample, class) pairs, CXR-present only, whose largest
    attention weight sits on the representation with the lowest auxiliary loss."""
    has = outputs["has_cxr"].astype(bool)
    alpha = outputs["alpha"][has]  # (n, C, 3)
    y_aux = outputs["y_aux"][has]  # (n, 3, C)
    y = labels[has]
    losses = K.binary_cross_entropy(torch.from_numpy(np.broadcast_to(y[:, None, :], y_aux.shape).copy()),
                                    torch.from_numpy(y_aux).double()).numpy()
    best = losses.transpose(0, 2, 1).argmin(-1)  # (n, C)
    return float((alpha.argmax(-1) == best).mean())
