import json

import numpy as np
import pytest

from egorec import io
from egorec.cli import main

from conftest import write_tsv

FAST = ["--set", "dim=4", "--set", "max-epochs=3", "--set", "batch-size=64", "--set", "lr=0.01",
        "--set", "knn-k=3"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = _make_raw(root)
    rc = main(["prepare", "--interactions", str(raw / "inter.tsv"), "--features",
               f"v={raw / 'v.mmft'}", "--features", f"t={raw / 't.mmft'}",
               "--out-dir", str(root / "prep"), "--seed", "3"])
    assert rc == 0
    data = root / "prep" / "dataset"
    rc = main(["train", "--data", str(data), "--out-dir", str(root / "train"), *FAST])
    assert rc == 0
    return root, data


def _make_raw(root):
    rng = np.random.default_rng(7)
    rows = [(f"user{u}", f"item{i}", 5, 1_600_000_000 + 100 * u + i)
            for u in range(14) for i in range(30) if rng.random() < 0.7 or (u + i) % 3 == 0]
    raw = root / "raw"
    raw.mkdir()
    write_tsv(raw / "inter.tsv", rows)
    items = sorted({r[1] for r in rows})
    for m, dim in (("v", 6), ("t", 4)):
        io.write_matrix(raw / f"{m}.mmft", rng.normal(size=(len(items), dim)), items)
    return raw


def test_prepare_outputs(prepared):
    root, data = prepared
    for name in ("train.tsv", "val.tsv", "test.tsv", "id_map.jsonl", "dataset.json",
                 "features_v.mmft", "features_t.mmft"):
        assert (data / name).exists(), name
    manifest = io.read_json(root / "prep" / "manifest.json")
    assert manifest["verb"] == "prepare" and manifest["seed_used"] == 3
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_train_outputs(prepared):
    root, _ = prepared
    out = root / "train"
    assert len(io.read_jsonl(out / "history.jsonl")) == 3
    curve = io.read_jsonl(out / "loss_curve.jsonl")
    assert {"rec_loss", "reg", "total", "cl_loss_v", "cl_loss_t"} <= set(curve[0])
    assert "dim = 4" in (out / "config.txt").read_text()
    manifest = io.read_json(out / "manifest.json")
    assert manifest["config"]["dim"] == 4 and manifest["argv"][0] == "train"


def test_evaluate_reproduces_best_validation(prepared, capsys):
    root, data = prepared
    ck = io.read_json(root / "train" / "checkpoint" / "manifest.json")
    rc = main(["evaluate", "--data", str(data), "--checkpoint", str(root / "train" / "checkpoint"),
               "--split", "val", "--out-dir", str(root / "eval"), "--per-user"])
    assert rc == 0
    metrics = io.read_json(root / "eval" / "metrics_val.json")["metrics"]
    assert metrics["R@20"] == ck["best_val_R@20"]
    assert (root / "eval" / "per_user_val.csv").exists()
    assert "R@20" in capsys.readouterr().out


def test_train_is_deterministic(prepared, tmp_path):
    root, data = prepared
    assert main(["train", "--data", str(data), "--out-dir", str(tmp_path / "again"), *FAST]) == 0
    a, b = root / "train" / "checkpoint", tmp_path / "again" / "checkpoint"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_build_graphs_export_diagnose(prepared, tmp_path):
    root, data = prepared
    ck = str(root / "train" / "checkpoint")
    assert main(["build-graphs", "--data", str(data), "--out-dir", str(tmp_path / "g"),
                 "--set", "knn-k=3", "--dump-tsv"]) == 0
    g = io.read_graph(tmp_path / "g" / "item_v.csrg")
    assert g.nnz == 3 * g.rows
    assert (tmp_path / "g" / "adjacency.tsv").exists()
    assert main(["export", "--data", str(data), "--checkpoint", ck, "--which", "all",
                 "--out-dir", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x" / "neighbor_t.mmft").exists()
    assert main(["diagnose", "--data", str(data), "--checkpoint", ck, "--compare", ck,
                 "--out-dir", str(tmp_path / "d")]) == 0
    result = json.loads((tmp_path / "d" / "dispersion.json").read_text())
    assert result["verdict"] == "equal dispersion"


def test_gridsearch(prepared, tmp_path):
    _, data = prepared
    assert main(["gridsearch", "--data", str(data), "--out-dir", str(tmp_path), *FAST,
                 "--grid", "reg_weight=0.01,0.001", "--grid", "cl-weight=0.01"]) == 0
    rows = io.read_json(tmp_path / "grid.json")
    assert len(rows) == 2 and rows[0]["rank"] == 1


def test_config_errors_list_every_key(prepared, tmp_path, capsys):
    _, data = prepared
    cfg = tmp_path / "bad.txt"
    cfg.write_text("lr = -1\nwidth = 3\n")
    rc = main(["train", "--data", str(data), "--config", str(cfg), "--set", "nope=1",
               "--out-dir", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "width" in err and "nope" in err and "lr must be > 0" in err


def test_unknown_verb_rejected():
    with pytest.raises(SystemExit):
        main(["fly"])


def test_missing_input(tmp_path, capsys):
    rc = main(["prepare", "--interactions", str(tmp_path / "none.tsv"),
               "--out-dir", str(tmp_path)])
    assert rc == 1
    assert "not found" in capsys.readouterr().err


def test_gradcheck_verb(tmp_path):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    assert io.read_json(tmp_path / "gradcheck.json")["passed"] is True
