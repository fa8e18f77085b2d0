"""Command-line entry point: ``drfuse {generate,train,evaluate,ablate}``.

Exit status is 0 only when every output was written; configuration and
input problems exit with 2, failures during a run with 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, dump_config, load_config
from .data import (Dataset, Splits, generate_synthetic, load_dataset, preset, read_manifest, split,
                   to_batch, write_dataset)
from .errors import DrFuseError, InvalidConfigError, InvalidInputError, SchemaError
from .evaluation import (MetricReport, alpha_rows, attention_agreement, disentanglement_probe,
                         evaluate_model, projection_rows, write_csv, write_report)
from .experiments import MODELS, ablation_variant, build_model, evaluate_trained, train_model
from .fusion import ModelConfig
from .training import TrainConfig, read_checkpoint, save_checkpoint

log = logging.getLogger("drfuse")

CHECKPOINT = "checkpoint.safetensors"
TRAIN_LOG = "train_log.jsonl"
RESOLVED = "config.resolved.json"


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _resolve(args) -> ExperimentConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _ensure_out(path: str | Path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InvalidConfigError(f"output path exists and is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(config: ExperimentConfig) -> tuple[Dataset, Splits]:
    """The dataset named by the config and its train/val/test split."""
    ds = config.dataset
    if ds.manifest is not None:
        manifest = read_manifest(ds.manifest)
        dataset = load_dataset(ds.manifest)
        spec = manifest.get("split", {})
        seed = spec.get("seed", 0) if ds.split_seed is None else ds.split_seed
        ratios = spec.get("ratios", ds.ratios) if ds.split_seed is None else ds.ratios
        return dataset, split(dataset, ratios, seed, spec.get("assignments"))
    dataset = generate_synthetic(ds.synthetic_config())
    seed = 0 if ds.split_seed is None else ds.split_seed
    return dataset, split(dataset, ds.ratios, seed)


def _checkpoint_meta(kind: str, model_cfg: ModelConfig, train_cfg: TrainConfig, splits: Splits,
                     config: ExperimentConfig, fit_result) -> dict:
    return {
        "kind": kind,
        "model": dataclasses.asdict(model_cfg),
        "training": dataclasses.asdict(train_cfg),
        "split": {"seed": splits.seed, "ratios": list(config.dataset.ratios),
                  "sizes": list(splits.sizes())},
        "config": config.to_dict(),
        "best_epoch": fit_result.best_epoch,
        "epochs_run": fit_result.epochs_run,
    }


def load_model(path: str | Path) -> tuple[torch.nn.Module, dict]:
    """Rebuild a model from a checkpoint written by ``train``."""
    state, meta = read_checkpoint(path)
    kind = meta.get("kind")
    if kind not in MODELS:
        raise SchemaError(str(path), "kind", f"unknown model kind {kind!r}")
    model = MODELS[kind](ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


# -- generate ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _resolve(args)
    ds = config.dataset
    if ds.manifest is not None:
        raise InvalidConfigError("generate needs a synthetic dataset section, not a manifest")
    name = args.preset or ds.preset or "default"
    synth = preset(name, **ds.synthetic)
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    synth.validate()
    split_seed = synth.seed if ds.split_seed is None else ds.split_seed
    out = _ensure_out(args.out)

    dataset = generate_synthetic(synth)
    manifest_path = write_dataset(dataset, out, split_seed, ds.ratios)
    reread = load_dataset(manifest_path)  # validate what was written
    if len(reread) != len(dataset):
        raise SchemaError(str(manifest_path), "records", "record count changed on re-read")
    labels = np.stack([r.labels for r in dataset])
    _dump_json(out / "generation_log.json", {
        "preset": name,
        "config": dataclasses.asdict(synth),
        "seed": synth.seed,
        "decoder_digest": dataset.meta["decoder_digest"],
        "n_records": len(dataset),
        "cxr_fraction": dataset.cxr_fraction,
        "prevalence": labels.mean(axis=0).round(6).tolist(),
        "class_roles": dataset.class_roles,
    })
    log.info("wrote %d records to %s", len(dataset), out)
    return 0


# -- train ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _resolve(args)
    dataset, splits = _load_data(config)
    model_cfg = config.model_config(dataset.n_features, dataset.n_classes)
    out = _ensure_out(args.out)
    dump_config(config, out / RESOLVED)
    trained = train_model(config.kind, splits, model_cfg, config.training, log_path=out / TRAIN_LOG)
    meta = _checkpoint_meta(config.kind, model_cfg, trained.train_cfg, splits, config, trained.fit)
    save_checkpoint(out / CHECKPOINT, trained.model, meta)
    log.info("best epoch %d, val macro PRAUC %.4f", trained.fit.best_epoch, trained.fit.best_val_prauc)
    return 0


# -- evaluate ---------------------------------------------------------------------------


def _eval_dataset(args, meta: dict) -> Dataset:
    manifest = read_manifest(args.dataset)
    dataset = load_dataset(args.dataset)
    model = meta["model"]
    if dataset.n_classes != model["n_classes"]:
        raise InvalidInputError(
            f"dataset has {dataset.n_classes} classes but the checkpoint predicts {model['n_classes']}")
    if dataset.n_features != model["n_features"]:
        raise InvalidInputError(
            f"dataset has {dataset.n_features} EHR features but the checkpoint expects {model['n_features']}")
    if args.split == "all":
        return dataset
    spec = meta.get("split") or manifest.get("split", {})
    splits = split(dataset, spec.get("ratios", (0.7, 0.1, 0.2)), spec.get("seed", 0),
                   manifest.get("split", {}).get("assignments"))
    return getattr(splits, args.split)


def cmd_evaluate(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    eval_cfg = config.eval
    seed = eval_cfg.seed if args.seed is None else args.seed
    model, meta = load_model(args.checkpoint)
    data = _eval_dataset(args, meta)
    out = _ensure_out(args.out)

    subsets = {"matched": data.matched()} if args.matched_only else {"full": data, "matched": data.matched()}
    reports: list[MetricReport] = []
    alpha_written = False
    for name, subset in subsets.items():
        if len(subset) == 0:
            log.warning("%s subset is empty; skipped", name)
            continue
        batch = to_batch(subset)
        report, outputs = evaluate_model(model, batch, name, eval_cfg.n_boot, eval_cfg.level, seed)
        if "alpha" in outputs:
            report.extra["attention_agreement"] = attention_agreement(outputs, batch.labels.numpy())
            if not alpha_written:  # the widest subset evaluated
                write_csv(out / "alpha.csv", alpha_rows(batch.ids, outputs["alpha"], outputs["has_cxr"]))
                write_csv(out / "projection.csv", projection_rows(outputs, batch.ids, seed))
                alpha_written = True
            if eval_cfg.probe and subset.has_factors and len(subset) >= 10:
                factors = {f: np.stack([r.factors[f] for r in subset]) for f in ("shared", "ehr", "cxr")}
                report.probe = disentanglement_probe(model, batch, factors, seed=seed)
        reports.append(report)
    if not reports:
        raise InvalidInputError("nothing to evaluate: every requested subset is empty")
    write_report(out, reports, extra={
        "checkpoint_kind": meta["kind"],
        "split": args.split,
        "bootstrap": {"n_iter": eval_cfg.n_boot, "level": eval_cfg.level, "seed": seed},
    })
    for r in reports:
        log.info("%s: macro PRAUC %.4f [%.4f, %.4f] (n=%d)", r.subset, r.macro, *r.ci, r.n_samples)
    return 0


# -- ablate -----------------------------------------------------------------------------


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def _report_row(name: str, reports: dict[str, MetricReport], splits: Splits, seed: int) -> dict:
    row = {"variant": name}
    for subset in ("matched", "full"):
        r = reports.get(subset)
        row[f"{subset}_prauc"] = None if r is None else round(r.macro, 10)
        row[f"{subset}_ci_lo"] = None if r is None else round(r.ci[0], 10)
        row[f"{subset}_ci_hi"] = None if r is None else round(r.ci[1], 10)
    full = reports.get("full")
    row["attention_agreement"] = None if full is None else round(full.extra["attention_agreement"], 10)
    probe = None if full is None else full.probe
    row["mean_jsd"] = None if probe is None else round(probe["mean_jsd"], 10)
    row["split_seed"] = splits.seed
    row["train_seed"] = seed
    return row


def cmd_ablate(args) -> int:
    config = _resolve(args)
    dataset, splits = _load_data(config)
    base_model = config.model_config(dataset.n_features, dataset.n_classes)
    if config.kind != "drfuse":
        raise InvalidConfigError("ablations apply to the drfuse model only")
    out = _ensure_out(args.out)
    dump_config(config, out / RESOLVED)
    eval_cfg = config.eval
    train_on = config.ablation.train_on

    rows, detail = [], {}
    for name in config.ablation.variants:
        m_cfg, t_cfg = ablation_variant(name, base_model, config.training)
        vdir = out / "variants" / _slug(name)
        vdir.mkdir(parents=True, exist_ok=True)
        key = _digest({"model": dataclasses.asdict(m_cfg), "training": dataclasses.asdict(t_cfg),
                       "split": [splits.seed, list(config.dataset.ratios)], "train_on": train_on,
                       "data": dataset.meta.get("decoder_digest"), "n": len(dataset)})
        ckpt = vdir / CHECKPOINT
        trained = None
        if ckpt.is_file():
            model, meta = load_model(ckpt)
            if meta.get("variant_key") == key:
                log.info("%s: resuming from %s", name, ckpt)
                trained = _Restored(model)
        if trained is None:
            fitted = train_model("drfuse", splits, m_cfg, t_cfg, train_on, log_path=vdir / TRAIN_LOG)
            meta = _checkpoint_meta("drfuse", m_cfg, t_cfg, splits, config, fitted.fit)
            meta.update(variant=name, variant_key=key, train_on=train_on)
            save_checkpoint(ckpt, fitted.model, meta)
            trained = fitted
        reports = evaluate_trained(trained, splits, eval_cfg.n_boot, eval_cfg.seed, with_probe=eval_cfg.probe)
        rows.append(_report_row(name, reports, splits, t_cfg.seed))
        detail[name] = {subset: r.summary() for subset, r in reports.items()}
        for subset, r in reports.items():
            if r.probe is not None:
                detail[name][subset]["probe"] = r.probe
        log.info("%s: matched %.4f full %.4f", name, rows[-1]["matched_prauc"] or float("nan"),
                 rows[-1]["full_prauc"] or float("nan"))

    write_csv(out / "ablation.csv", rows)
    _dump_json(out / "summary.json", {"rows": rows, "detail": detail, "train_on": train_on,
                                      "split_seed": splits.seed, "split_sizes": list(splits.sizes()),
                                      "bootstrap": dataclasses.asdict(eval_cfg)})
    return 0


@dataclasses.dataclass
class _Restored:
    """Minimal stand-in for a TrainedModel loaded from a checkpoint."""

    model: torch.nn.Module
    kind: str = "drfuse"


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="experiment config (YAML or JSON)")
    p.add_argument("--preset", help="synthetic preset: default, smoke, mimic-like")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the generator and split seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit one model")
    p.add_argument("--config", help="experiment config (YAML or JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="manifest.json of the dataset")
    p.add_argument("--config", help="experiment config; only the eval section is used")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the bootstrap and probe seed")
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--matched-only", action="store_true", help="evaluate CXR-present samples only")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare the four ablation variants")
    p.add_argument("--config", help="experiment config (YAML or JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InvalidConfigError, InvalidInputError, SchemaError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (DrFuseError, RuntimeError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
