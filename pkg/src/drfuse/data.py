"""Datasets: synthetic generation, record-file I/O, splitting and batching.

Record files are line-delimited JSON, one sample per line::

    {"id": "syn-000001",
     "ehr": [[...J floats...], ...T rows...],
     "cxr": {"shape": [1, 16, 16], "data": [...flattened...]} | null,
     "labels": [0, 1, ...],
     "factors": {"shared": [...], "ehr": [...], "cxr": [...]}}   # optional

A manifest (JSON) names the record file and carries |C|, J and the split
seed/ratios, optionally explicit split assignments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from scipy.optimize import brentq

from .errors import InvalidConfigError, InvalidInputError, SchemaError

ROLES = ("shared", "ehr", "cxr")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)
DECIMALS = 5


@dataclass
class SampleRecord:
    id: str
    ehr: np.ndarray  # (T, J)
    cxr: np.ndarray | None  # (channels, H, W) in [0, 1], None when absent
    labels: np.ndarray  # (C,) of 0/1
    factors: dict[str, np.ndarray] | None = None

    @property
    def has_cxr(self) -> bool:
        return self.cxr is not None

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        if self.id != other.id or self.has_cxr != other.has_cxr:
            return False
        if not (np.array_equal(self.ehr, other.ehr) and np.array_equal(self.labels, other.labels)):
            return False
        if self.has_cxr and not np.array_equal(self.cxr, other.cxr):
            return False
        if (self.factors is None) != (other.factors is None):
            return False
        if self.factors is not None:
            if self.factors.keys() != other.factors.keys():
                return False
            return all(np.array_equal(self.factors[k], other.factors[k]) for k in self.factors)
        return True


@dataclass
class Dataset:
    records: list[SampleRecord]
    n_classes: int
    n_features: int
    class_roles: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> SampleRecord:
        return self.records[i]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return dataclasses.replace(self, records=[self.records[i] for i in indices])

    def matched(self) -> "Dataset":
        """Samples that carry both modalities."""
        return dataclasses.replace(self, records=[r for r in self.records if r.has_cxr])

    def without_cxr(self) -> "Dataset":
        return dataclasses.replace(
            self, records=[dataclasses.replace(r, cxr=None) for r in self.records]
        )

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def has_factors(self) -> bool:
        return bool(self.records) and all(r.factors is not None for r in self.records)

    @property
    def cxr_fraction(self) -> float:
        return float(np.mean([r.has_cxr for r in self.records])) if self.records else 0.0


# -- synthetic generation ------------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_samples: int = 5000
    n_classes: int = 8
    d_shared: int = 4
    d_ehr_distinct: int = 4
    d_cxr_distinct: int = 4
    T: int = 12
    J: int = 17
    image_size: int = 16
    missing_rate: float = 0.4
    missing_mechanism: str = "MCAR"
    label_noise: float = 0.0
    seed: int = 0
    label_scale: float = 4.0
    ehr_noise: float = 0.3
    cxr_noise: float = 0.05
    prevalence_range: tuple[float, float] = (0.1, 0.4)

    def __post_init__(self):
        self.prevalence_range = tuple(self.prevalence_range)
        self.validate()

    def validate(self) -> None:
        for name in ("n_samples", "n_classes", "d_shared", "d_ehr_distinct", "d_cxr_distinct",
                     "T", "J", "image_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        for name in ("missing_rate", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.missing_mechanism not in ("MCAR", "MNAR"):
            raise InvalidConfigError("missing_mechanism must be 'MCAR' or 'MNAR'")
        lo, hi = self.prevalence_range
        if not 0.0 < lo <= hi < 1.0:
            raise InvalidConfigError("prevalence_range must satisfy 0 < lo <= hi < 1")


PRESETS: dict[str, dict] = {
    "default": {},
    "smoke": {"n_samples": 200},
    "mimic-like": {"n_classes": 25, "J": 17, "T": 48, "image_size": 32},
}


def preset(name: str, **overrides) -> SyntheticConfig:
    if name not in PRESETS:
        raise InvalidConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SyntheticConfig(**{**PRESETS[name], **overrides})


def class_roles(n_classes: int) -> list[str]:
    """Which latent block drives each class: cycles shared, ehr, cxr."""
    return [ROLES[c % 3] for c in range(n_classes)]


def _expected_logistic(bias: float, scale: float) -> float:
    # E[sigmoid(scale * g + bias)], g ~ N(0, 1), via Gauss-Hermite quadrature
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    return float(np.sum(weights / np.sqrt(2 * np.pi) / (1 + np.exp(-(scale * nodes + bias)))))


def _smooth_patterns(rng: np.random.Generator, k: int, size: int) -> np.ndarray:
    """k zero-mean, unit-RMS low-frequency images of shape (size, size)."""
    grid = np.arange(size) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((k, size, size))
    for i in range(k):
        img = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.integers(-2, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        # localise each pattern with a Gaussian bump
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        img *= np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.25**2))
        img -= img.mean()
        out[i] = img / (np.sqrt((img**2).mean()) + 1e-12)
    return out


def make_decoders(config: SyntheticConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fixed random maps from latent factors to observations and labels."""
    k_ehr = config.d_shared + config.d_ehr_distinct
    k_cxr = config.d_shared + config.d_cxr_distinct
    dec = {
        "ehr_static": rng.normal(size=(config.J, k_ehr)) / np.sqrt(k_ehr) * 1.5,
        "ehr_trend": rng.normal(size=(config.J, k_ehr)) / np.sqrt(k_ehr) * 1.5,
        "ehr_bias": rng.normal(scale=0.5, size=config.J),
        "cxr_patterns": _smooth_patterns(rng, k_cxr, config.image_size),
    }
    dims = {"shared": config.d_shared, "ehr": config.d_ehr_distinct, "cxr": config.d_cxr_distinct}
    roles = class_roles(config.n_classes)
    weights = np.zeros((config.n_classes, sum(dims.values())))
    offsets = {"shared": 0, "ehr": dims["shared"], "cxr": dims["shared"] + dims["ehr"]}
    biases = np.zeros(config.n_classes)
    lo, hi = config.prevalence_range
    for c, role in enumerate(roles):
        w = rng.normal(size=dims[role])
        w /= np.linalg.norm(w)
        weights[c, offsets[role]: offsets[role] + dims[role]] = w
        target = rng.uniform(lo, hi)
        biases[c] = brentq(lambda b: _expected_logistic(b, config.label_scale) - target, -30, 30)
    dec["label_weights"] = weights * config.label_scale
    dec["label_bias"] = biases
    return dec


def decoder_digest(decoders: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(decoders):
        h.update(key.encode())
        h.update(np.ascontiguousarray(decoders[key], dtype=np.float64).tobytes())
    return h.hexdigest()


def _missing_mask(config: SyntheticConfig, z_ehr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(z_ehr))
    rate = config.missing_rate
    if config.missing_mechanism == "MCAR" or rate in (0.0, 1.0):
        return u < rate
    # MNAR: dropping probability increases with the EHR-distinct factor norm
    norm = np.linalg.norm(z_ehr, axis=1)
    norm = (norm - norm.mean()) / (norm.std() + 1e-12)
    slope = 2.0
    shift = brentq(lambda s: np.mean(1 / (1 + np.exp(-(slope * norm + s)))) - rate, -50, 50)
    return u < 1 / (1 + np.exp(-(slope * norm + shift)))


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw a two-modality dataset with known latent factors.

    Per sample, standard-normal factors ``z_shared``, ``z_ehr`` and ``z_cxr``
    are drawn.  The EHR sequence decodes ``[z_shared, z_ehr]``, the image
    decodes ``[z_shared, z_cxr]``, and each class is driven by exactly one
    of the three blocks (see :func:`class_roles`).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dec = make_decoders(config, rng)
    n = config.n_samples
    z_s = rng.standard_normal((n, config.d_shared))
    z_e = rng.standard_normal((n, config.d_ehr_distinct))
    z_c = rng.standard_normal((n, config.d_cxr_distinct))

    u_ehr = np.concatenate([z_s, z_e], axis=1)
    static = np.tanh(u_ehr @ dec["ehr_static"].T + dec["ehr_bias"])  # (n, J)
    trend = np.tanh(u_ehr @ dec["ehr_trend"].T)
    time = np.linspace(-0.5, 0.5, config.T) if config.T > 1 else np.zeros(1)
    ehr = static[:, None, :] + time[None, :, None] * trend[:, None, :]
    ehr = ehr + config.ehr_noise * rng.standard_normal(ehr.shape)

    u_cxr = np.concatenate([z_s, z_c], axis=1)
    k_cxr = u_cxr.shape[1]
    field_ = np.einsum("nk,khw->nhw", u_cxr, dec["cxr_patterns"]) / np.sqrt(k_cxr) * 2.0
    field_ = field_ + config.cxr_noise * rng.standard_normal(field_.shape)
    cxr = 1 / (1 + np.exp(-field_))

    z_all = np.concatenate([z_s, z_e, z_c], axis=1)
    prob = 1 / (1 + np.exp(-(z_all @ dec["label_weights"].T + dec["label_bias"])))
    labels = (rng.random(prob.shape) < prob).astype(np.int64)
    flip = rng.random(labels.shape) < config.label_noise
    labels = np.where(flip, 1 - labels, labels)

    missing = _missing_mask(config, z_e, rng)

    ehr, cxr = np.round(ehr, DECIMALS), np.round(cxr, DECIMALS)
    z_s, z_e, z_c = (np.round(z, DECIMALS) for z in (z_s, z_e, z_c))
    records = [
        SampleRecord(
            id=f"syn-{i:06d}",
            ehr=ehr[i],
            cxr=None if missing[i] else cxr[i][None],
            labels=labels[i],
            factors={"shared": z_s[i], "ehr": z_e[i], "cxr": z_c[i]},
        )
        for i in range(n)
    ]
    meta = {
        "generator": dataclasses.asdict(config),
        "decoder_digest": decoder_digest(dec),
        "decoders": dec,
    }
    return Dataset(records, config.n_classes, config.J, class_roles(config.n_classes), meta)


# -- record I/O ------------------------------------------------------------------------


def record_to_json(record: SampleRecord) -> str:
    obj = {
        "id": record.id,
        "ehr": record.ehr.tolist(),
        "cxr": None if record.cxr is None
        else {"shape": list(record.cxr.shape), "data": record.cxr.reshape(-1).tolist()},
        "labels": [int(v) for v in record.labels],
    }
    if record.factors is not None:
        obj["factors"] = {k: v.tolist() for k, v in record.factors.items()}
    return json.dumps(obj, separators=(",", ":"))


def _parse_matrix(rid, name, value, ndim) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(rid, name, f"not numeric ({exc})") from None
    if arr.ndim != ndim:
        raise SchemaError(rid, name, f"expected {ndim}-d array, got {arr.ndim}-d")
    if not np.isfinite(arr).all():
        raise SchemaError(rid, name, "non-finite values")
    return arr


def record_from_json(obj: dict, n_classes: int, n_features: int) -> SampleRecord:
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise SchemaError(rid, "id", "missing or not a string")
    for key in ("ehr", "cxr", "labels"):
        if key not in obj:
            raise SchemaError(rid, key, "missing field")
    ehr = _parse_matrix(rid, "ehr", obj["ehr"], 2)
    if ehr.shape[0] < 1:
        raise SchemaError(rid, "ehr", "sequence has no time steps")
    if ehr.shape[1] != n_features:
        raise SchemaError(rid, "ehr", f"expected {n_features} features, got {ehr.shape[1]}")
    cxr = None
    if obj["cxr"] is not None:
        spec = obj["cxr"]
        if not isinstance(spec, dict) or "shape" not in spec or "data" not in spec:
            raise SchemaError(rid, "cxr", "expected {shape, data} or null")
        data = _parse_matrix(rid, "cxr", spec["data"], 1)
        shape = tuple(int(s) for s in spec["shape"])
        if len(shape) not in (2, 3) or math.prod(shape) != data.size:
            raise SchemaError(rid, "cxr", f"shape {shape} does not match {data.size} values")
        cxr = data.reshape(shape if len(shape) == 3 else (1, *shape))
        if cxr.min() < 0 or cxr.max() > 1:
            raise SchemaError(rid, "cxr", "intensities must lie in [0, 1]")
    labels = obj["labels"]
    if not isinstance(labels, list) or any(v not in (0, 1) for v in labels):
        raise SchemaError(rid, "labels", "expected a list of 0/1")
    if len(labels) != n_classes:
        raise SchemaError(rid, "labels", f"expected {n_classes} labels, got {len(labels)}")
    factors = None
    if obj.get("factors") is not None:
        factors = {k: _parse_matrix(rid, f"factors.{k}", v, 1) for k, v in obj["factors"].items()}
    return SampleRecord(rid, ehr, cxr, np.asarray(labels, dtype=np.int64), factors)


def write_records(records: Iterable[SampleRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")


def iter_records(path: str | Path, n_classes: int, n_features: int) -> Iterator[SampleRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"<line {lineno}>", "json", str(exc)) from None
            yield record_from_json(obj, n_classes, n_features)


def write_dataset(dataset: Dataset, out_dir: str | Path, split_seed: int = 0,
                  ratios: Sequence[float] = DEFAULT_RATIOS) -> Path:
    """Write records, decoders (if any) and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(dataset.records, out_dir / "records.jsonl")
    manifest = {
        "format_version": 1,
        "records": "records.jsonl",
        "n_classes": dataset.n_classes,
        "n_features": dataset.n_features,
        "split": {"seed": split_seed, "ratios": list(ratios)},
    }
    if dataset.class_roles is not None:
        manifest["class_roles"] = dataset.class_roles
    if "decoders" in dataset.meta:
        np.savez(out_dir / "decoders.npz", **dataset.meta["decoders"])
        manifest["decoders"] = "decoders.npz"
        manifest["decoder_digest"] = dataset.meta["decoder_digest"]
    if "generator" in dataset.meta:
        manifest["generator"] = dataset.meta["generator"]
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for key in ("records", "n_classes", "n_features"):
        if key not in manifest:
            raise SchemaError("<manifest>", key, "missing field")
    split = manifest.setdefault("split", {"seed": 0, "ratios": list(DEFAULT_RATIOS)})
    if abs(sum(split.get("ratios", DEFAULT_RATIOS)) - 1.0) > 1e-9:
        raise SchemaError("<manifest>", "split.ratios", "must sum to 1")
    manifest["_dir"] = str(path.parent)
    return manifest


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest = read_manifest(manifest_path)
    base = Path(manifest["_dir"])
    records_path = base / manifest["records"]
    if not records_path.is_file():
        raise FileNotFoundError(f"record file not found: {records_path}")
    n_classes, n_features = int(manifest["n_classes"]), int(manifest["n_features"])
    records = list(iter_records(records_path, n_classes, n_features))
    meta = {"manifest": manifest}
    if "generator" in manifest:
        meta["generator"] = manifest["generator"]
    if "decoders" in manifest:
        with np.load(base / manifest["decoders"]) as npz:
            meta["decoders"] = {k: npz[k] for k in npz.files}
        meta["decoder_digest"] = manifest.get("decoder_digest")
    return Dataset(records, n_classes, n_features, manifest.get("class_roles"), meta)


# -- splitting -------------------------------------------------------------------------


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    seed: int

    def matched(self) -> "Splits":
        """The CXR-present subset of each split.

        Being taken split-by-split, the matched validation and test sets are
        contained in the full validation and test sets respectively.
        """
        return Splits(self.train.matched(), self.val.matched(), self.test.matched(), self.seed)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split(dataset: Dataset, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0,
          assignments: dict[str, list[str]] | None = None) -> Splits:
    """Shuffle and cut into train/val/test.  Explicit ``assignments`` (id lists) win."""
    if assignments is not None:
        index = {r.id: i for i, r in enumerate(dataset.records)}
        parts = []
        for name in ("train", "val", "test"):
            try:
                parts.append(dataset.subset(index[i] for i in assignments.get(name, [])))
            except KeyError as exc:
                raise SchemaError(str(exc.args[0]), "split", "unknown record id") from None
        return Splits(*parts, seed=seed)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise InvalidConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(dataset)
    if n < 3:
        raise InvalidInputError(f"need at least 3 records to split, got {n}")
    n_train = max(1, int(round(n * ratios[0])))
    n_val = max(1, int(round(n * ratios[1])))
    n_train = min(n_train, n - n_val - 1)
    order = np.random.default_rng(seed).permutation(n)
    return Splits(
        dataset.subset(order[:n_train]),
        dataset.subset(order[n_train:n_train + n_val]),
        dataset.subset(order[n_train + n_val:]),
        seed=seed,
    )


def split_from_manifest(dataset: Dataset, seed: int | None = None) -> Splits:
    manifest = dataset.meta.get("manifest", {})
    spec = manifest.get("split", {})
    seed = spec.get("seed", 0) if seed is None else seed
    return split(dataset, spec.get("ratios", DEFAULT_RATIOS), seed, spec.get("assignments"))


# -- tensors ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded tensors for a set of samples."""

    ehr: torch.Tensor  # (N, T, J)
    ehr_mask: torch.Tensor  # (N, T) bool, True on real time steps
    cxr: torch.Tensor  # (N, channels, H, W), zeros where absent
    has_cxr: torch.Tensor  # (N,) bool
    labels: torch.Tensor  # (N, C)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ehr.shape[0]

    def index(self, idx) -> "Batch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.ehr[idx], self.ehr_mask[idx], self.cxr[idx], self.has_cxr[idx],
                     self.labels[idx], [self.ids[i] for i in idx.tolist()] if self.ids else [])

    def to(self, dtype: torch.dtype) -> "Batch":
        return dataclasses.replace(self, ehr=self.ehr.to(dtype), cxr=self.cxr.to(dtype),
                                   labels=self.labels.to(dtype))

    def matched(self) -> "Batch":
        return self.index(torch.nonzero(self.has_cxr).flatten())


def to_batch(dataset: Dataset, dtype: torch.dtype = torch.float32,
             image_shape: tuple[int, ...] | None = None) -> Batch:
    """Pad every sequence to the longest T and stack into a :class:`Batch`."""
    records = dataset.records
    n = len(records)
    t_max = max((r.ehr.shape[0] for r in records), default=1)
    if image_shape is None:
        shapes = {r.cxr.shape for r in records if r.has_cxr}
        if len(shapes) > 1:
            raise InvalidInputError(f"images of differing shapes in one dataset: {sorted(shapes)}")
        image_shape = shapes.pop() if shapes else (1, 1, 1)
    ehr = np.zeros((n, t_max, dataset.n_features))
    mask = np.zeros((n, t_max), dtype=bool)
    cxr = np.zeros((n, *image_shape))
    has = np.zeros(n, dtype=bool)
    labels = np.zeros((n, dataset.n_classes))
    for i, r in enumerate(records):
        t = r.ehr.shape[0]
        ehr[i, :t] = r.ehr
        mask[i, :t] = True
        if r.has_cxr:
            if r.cxr.shape != tuple(image_shape):
                raise InvalidInputError(f"record {r.id}: image shape {r.cxr.shape} != {image_shape}")
            cxr[i] = r.cxr
            has[i] = True
        labels[i] = r.labels
    return Batch(
        torch.as_tensor(ehr, dtype=dtype),
        torch.as_tensor(mask),
        torch.as_tensor(cxr, dtype=dtype),
        torch.as_tensor(has),
        torch.as_tensor(labels, dtype=dtype),
        [r.id for r in records],
    )


def ehr_statistics(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over all observed time steps (for z-scoring)."""
    if not len(dataset):
        return np.zeros(dataset.n_features), np.ones(dataset.n_features)
    rows = np.concatenate([r.ehr for r in dataset.records], axis=0)
    std = rows.std(axis=0)
    return rows.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def factor_matrix(dataset: Dataset, name: str) -> np.ndarray:
    return np.stack([r.factors[name] for r in dataset.records])
