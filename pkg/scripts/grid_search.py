#!/usr/bin/env python3
"""Validation-set grid search over the loss weights and learning rate.

Grid: lambda1, lambda2 in {0, 0.1, 1}; lambda3 in {0, 0.5, 1}; lr in
{1e-4, 1e-3}.  Every point is trained on the same split and seed; the
point with the best validation macro PRAUC is reported, and its test
score is the only test number printed.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
from pathlib import Path

import torch

from drfuse.data import SyntheticConfig, generate_synthetic, split
from drfuse.evaluation import write_csv
from drfuse.experiments import desk_scale_configs, evaluate_trained, train_model

GRID = {
    "lambda1": (0.0, 0.1, 1.0),
    "lambda2": (0.0, 0.1, 1.0),
    "lambda3": (0.0, 0.5, 1.0),
    "lr": (1e-4, 1e-3),
}

log = logging.getLogger("grid_search")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-samples", type=int, default=5000)
    parser.add_argument("--max-epochs", type=int, default=30)
    parser.add_argument("--limit", type=int, help="only the first N grid points (for quick checks)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)

    splits = split(generate_synthetic(SyntheticConfig(n_samples=args.n_samples, seed=args.seed)), seed=args.seed)
    model_cfg, base = desk_scale_configs(seed=args.seed, max_epochs=args.max_epochs)
    points = [dict(zip(GRID, values)) for values in itertools.product(*GRID.values())]
    if args.limit:
        points = points[: args.limit]

    rows, best = [], None
    for i, point in enumerate(points, 1):
        train_cfg = dataclasses.replace(base, **point)
        trained = train_model("drfuse", splits, model_cfg, train_cfg)
        row = {**point, "val_macro_prauc": round(trained.fit.best_val_prauc, 4),
               "best_epoch": trained.fit.best_epoch}
        rows.append(row)
        log.info("[%d/%d] %s", i, len(points), row)
        if best is None or trained.fit.best_val_prauc > best[0]:
            best = (trained.fit.best_val_prauc, point, trained)
        write_csv(args.out / "grid.csv", rows)

    score, point, trained = best
    test = evaluate_trained(trained, splits, n_boot=1000, seed=args.seed)
    log.info("best %s (val %.4f): test full %.4f, matched %.4f", point, score,
             test["full"].macro, test["matched"].macro)


if __name__ == "__main__":
    main()
