import csv
import json
import logging
import time

import pytest

from drfuse.cli import main

SMALL_MODEL = {"d": 16, "n_heads": 2, "ff_dim": 32, "conv_channels": [4, 8]}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--preset", "smoke", "--out", str(root / "data")]) == 0
    cfg = write_config(root / "exp.json", dataset={"manifest": str(root / "data" / "manifest.json")},
                       model=SMALL_MODEL, training={"max_epochs": 3, "lr": 1e-3}, eval={"n_boot": 50})
    return root, cfg


# -- generate -----------------------------------------------------------------------------


def test_generate_outputs(smoke):
    root, _ = smoke
    names = {p.name for p in (root / "data").iterdir()}
    assert names == {"records.jsonl", "manifest.json", "decoders.npz", "generation_log.json"}
    log = json.loads((root / "data" / "generation_log.json").read_text())
    assert log["seed"] == 0 and len(log["decoder_digest"]) == 64 and log["n_records"] == 200


def test_generate_is_byte_identical(smoke, tmp_path):
    root, _ = smoke
    assert main(["generate", "--preset", "smoke", "--out", str(tmp_path)]) == 0
    for name in ("records.jsonl", "manifest.json", "generation_log.json"):
        assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_generate_mimic_like(tmp_path):
    cfg = write_config(tmp_path / "c.json", dataset={"synthetic": {"n_samples": 10}})
    assert main(["generate", "--preset", "mimic-like", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["n_classes"] == 25 and manifest["n_features"] == 17
    assert manifest["generator"]["T"] == 48


def test_generate_invalid_config_writes_nothing(tmp_path):
    cfg = write_config(tmp_path / "bad.json", dataset={"synthetic": {"missing_rate": 1.5}})
    out = tmp_path / "out"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_generate_seed_flag(tmp_path):
    assert main(["generate", "--preset", "smoke", "--seed", "4", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "generation_log.json").read_text())["seed"] == 4


def test_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("x")
    assert main(["generate", "--preset", "smoke", "--out", str(tmp_path / "file")]) != 0


# -- train ----------------------------------------------------------------------------------


def test_train_smoke_and_reproducible(smoke, tmp_path):
    root, cfg = smoke
    start = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert time.perf_counter() - start < 60
    assert {p.name for p in (tmp_path / "a").iterdir()} == {
        "checkpoint.safetensors", "train_log.jsonl", "config.resolved.json"}
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 1, 2, 2, 3, 3]

    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    ckpt = (tmp_path / "a" / "checkpoint.safetensors").read_bytes()
    assert ckpt == (tmp_path / "b" / "checkpoint.safetensors").read_bytes()

    # the snapshot alone reproduces the run
    snap = tmp_path / "a" / "config.resolved.json"
    assert main(["train", "--config", str(snap), "--out", str(tmp_path / "c")]) == 0
    assert ckpt == (tmp_path / "c" / "checkpoint.safetensors").read_bytes()


def test_train_does_not_modify_inputs(smoke, tmp_path):
    root, cfg = smoke
    before = {p.name: p.read_bytes() for p in (root / "data").iterdir()}
    cfg_before = cfg.read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert {p.name: p.read_bytes() for p in (root / "data").iterdir()} == before
    assert cfg.read_bytes() == cfg_before


def test_train_missing_dataset_names_path(tmp_path, caplog):
    cfg = write_config(tmp_path / "c.json", dataset={"manifest": str(tmp_path / "nowhere" / "manifest.json")})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "nowhere" in caplog.text


def test_train_baseline_kind(smoke, tmp_path):
    root, cfg = smoke
    doc = json.loads(cfg.read_text())
    doc["model"] = {**doc["model"], "kind": "ehr_only"}
    c2 = write_config(tmp_path / "c.json", **doc)
    assert main(["train", "--config", str(c2), "--out", str(tmp_path / "o")]) == 0
    assert main(["evaluate", "--checkpoint", str(tmp_path / "o" / "checkpoint.safetensors"),
                 "--dataset", str(root / "data" / "manifest.json"), "--out", str(tmp_path / "e")]) == 0
    assert not (tmp_path / "e" / "alpha.csv").exists()


# -- evaluate ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(smoke, tmp_path_factory):
    root, cfg = smoke
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out / "checkpoint.safetensors"


def evaluate(smoke, ckpt, out, *extra):
    root, cfg = smoke
    return main(["evaluate", "--checkpoint", str(ckpt), "--dataset", str(root / "data" / "manifest.json"),
                 "--config", str(cfg), "--out", str(out), *extra])


def test_evaluate_outputs(smoke, trained, tmp_path):
    assert evaluate(smoke, trained, tmp_path) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert [r["subset"] for r in doc["reports"]] == ["full", "matched"]
    assert doc["reports"][0]["macro_prauc"] != doc["reports"][1]["macro_prauc"]
    assert "probe" in doc and set(doc["probe"]) == {"full", "matched"}
    with open(tmp_path / "alpha.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert any(r["has_cxr"] == "0" for r in rows)
    for r in rows:
        if r["has_cxr"] == "0":
            assert float(r["alpha_distinct_cxr"]) == 0.0


def test_evaluate_matched_only(smoke, trained, tmp_path):
    assert evaluate(smoke, trained, tmp_path, "--matched-only") == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert [r["subset"] for r in doc["reports"]] == ["matched"]
    with open(tmp_path / "alpha.csv") as fh:
        assert all(r["has_cxr"] == "1" for r in csv.DictReader(fh))


def test_evaluate_is_byte_identical(smoke, trained, tmp_path):
    assert evaluate(smoke, trained, tmp_path / "a") == 0
    assert evaluate(smoke, trained, tmp_path / "b") == 0
    for name in ("summary.json", "per_class.csv", "alpha.csv", "projection.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_class_mismatch(trained, tmp_path, caplog):
    assert main(["generate", "--preset", "smoke", "--out", str(tmp_path / "d")]) == 0
    cfg = write_config(tmp_path / "c.json", dataset={"synthetic": {"n_classes": 5}})
    assert main(["generate", "--preset", "smoke", "--config", str(cfg), "--out", str(tmp_path / "d5")]) == 0
    assert main(["evaluate", "--checkpoint", str(trained), "--dataset", str(tmp_path / "d5" / "manifest.json"),
                 "--out", str(tmp_path / "e")]) == 2
    assert "classes" in caplog.text


# -- ablate -------------------------------------------------------------------------------


def test_ablate_rows_and_resume(smoke, tmp_path, caplog):
    root, cfg = smoke
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["full", "w/o disentangled", "MSE alignment", "w/o attn ranking"]
    assert len({r["split_seed"] for r in rows}) == 1 and len({r["train_seed"] for r in rows}) == 1
    for r in rows:
        for subset in ("matched", "full"):
            assert float(r[f"{subset}_ci_lo"]) <= float(r[f"{subset}_prauc"]) <= float(r[f"{subset}_ci_hi"])
    first = (out / "ablation.csv").read_bytes()

    # simulate an interrupted run: one variant never finished
    (out / "variants" / "w_o_attn_ranking" / "checkpoint.safetensors").unlink()
    caplog.clear()
    caplog.set_level(logging.INFO, logger="drfuse")
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    assert caplog.text.count("resuming") == 3
    assert (out / "ablation.csv").read_bytes() == first
