import csv
import json

import numpy as np
import pytest

from grumo import cli, io, synth
from grumo import model as M


def run(*args):
    return cli.main([str(a) for a in args])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--seed", 5, "--count", 3, "--size", 32, "--out", root / "data", "--split", "test") == 0
    cfg = M.ModelConfig()
    M.save_model(M.Model(cfg, M.init_weights(cfg, 4), seed=4), root / "model")
    return root


# ---- gen-data / train ------------------------------------------------------------

def test_gen_data_is_byte_identical(tmp_path):
    assert run("gen-data", "--seed", 7, "--count", 4, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--seed", 7, "--count", 4, "--out", tmp_path / "b") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 9


def test_gen_data_edge_cases(tmp_path, capsys):
    assert run("gen-data", "--seed", 1, "--count", 0, "--out", tmp_path / "empty") == 0
    man = json.loads((tmp_path / "empty" / "manifest.json").read_text())
    assert man["scenes"] == [] and man["seeds"] == []
    assert run("gen-data", "--seed", 1, "--count", 1, "--size", 65, "--out", tmp_path / "odd") == 2
    assert "divisible by 8" in capsys.readouterr().err
    (tmp_path / "bare").mkdir()
    assert run("gen-data", "--seed", 1, "--count", 1, "--out", tmp_path / "bare") == 0   # empty dir is fine
    assert run("gen-data", "--seed", 2, "--count", 1, "--out", tmp_path / "empty") == 2
    assert "not empty" in capsys.readouterr().err
    assert run("gen-data", "--seed", 2, "--count", 1, "--out", tmp_path / "empty", "--force") == 0


def test_usage_errors_exit_1(tmp_path):
    assert run("gen-data", "--count", 1, "--out", tmp_path / "x") == 1      # --seed missing
    assert run("frobnicate") == 1
    assert run("gen-data", "--seed", 1, "--count", -1, "--out", tmp_path / "x") == 1
    assert run("gen-data", "--seed", 1, "--count", 1, "--size", "big", "--out", tmp_path / "x") == 1
    assert run("--help") == 0


def test_train_cli_writes_manifest(tmp_path, small):
    out = tmp_path / "m"
    assert run("train", "--data", small / "data", "--out", out, "--epochs", 0, "--seed", 3, "-v") == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and man["fixture_abs_rel"] > 0
    m = M.load_model(out)
    init = M.init_weights(m.config, 3)
    assert all(np.array_equal(m.weights[k].data, init[k].data) for k in init)
    assert run("train", "--data", small / "data", "--test", small / "data", "--out", tmp_path / "n",
               "--epochs", 0) == 2   # overlapping seeds


# ---- estimate ---------------------------------------------------------------------

def test_estimate_outputs(tmp_path, small):
    out = tmp_path / "est"
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--out", out) == 0
    run_cfg = json.loads((out / "run.json").read_text())
    assert run_cfg["method"] == "ours"
    assert run_cfg["config"]["layers"] == [6] and run_cfg["config"]["aug"] == "hflip"
    for seed in synth.read_sceneset(small / "data").seeds:
        d = out / str(seed)
        assert io.read_gt01(d / "depth.gt01").shape == (1, 1, 32, 32)
        u = io.read_gt01(d / "uncert.gt01")
        assert u.min() >= 0 and u.max() <= 1
        assert np.array_equal(io.read_pgm16(d / "uncert.pgm"), io.to_u16(u[0, 0]))
        assert io.read_gt01(d / "mask.gt01").all()


def test_estimate_method_defaults(tmp_path, small):
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--method", "ours-multi",
               "--out", tmp_path / "multi") == 0
    cfg = json.loads((tmp_path / "multi" / "run.json").read_text())["config"]
    assert cfg["layers"] == [5, 6, 7, 8] and cfg["fusion"] == "max" and cfg["layer_mode"] == "multi"
    assert run("estimate", "--model", small / "model", "--data", small / "data",
               "--method", "dropstar:8:0.2:1", "--out", tmp_path / "drop") == 0
    cfg = json.loads((tmp_path / "drop" / "run.json").read_text())["config"]
    assert cfg == {"kind": "dropstar", "n": 8, "p": 0.2, "seed": 1}


def test_estimate_rejects_layer_beyond_L(tmp_path, small, capsys):
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--layer", 10,
               "--out", tmp_path / "x") == 2
    assert "L=9" in capsys.readouterr().err
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--method", "nope",
               "--out", tmp_path / "y") == 2


def test_estimate_resume_and_thread_count(tmp_path, small, monkeypatch):
    out = tmp_path / "e"
    monkeypatch.setenv("GRUMO_THREADS", "1")
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--out", out) == 0
    first = tree_bytes(out)
    monkeypatch.setenv("GRUMO_THREADS", "4")
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--out", tmp_path / "f") == 0
    assert tree_bytes(tmp_path / "f") == first
    seed = synth.read_sceneset(small / "data").seeds[0]
    (out / str(seed) / "uncert.gt01").unlink()
    assert run("estimate", "--model", small / "model", "--data", small / "data", "--out", out, "--resume") == 0
    assert tree_bytes(out) == first


# ---- evaluate ----------------------------------------------------------------------

def _inject(pred_dir, data, u_of_error, seed=0):
    rng = np.random.default_rng(seed)
    preds = {}
    for sc in data:
        gt = sc.depth_gt.data
        pred = (gt * rng.uniform(0.8, 1.25, gt.shape)).astype(np.float32)
        preds[sc.seed] = pred
    e_all = np.concatenate([((p.astype(np.float64) - sc.depth_gt.data) ** 2).ravel()
                            for sc, p in zip(data, preds.values())])
    for sc in data:
        d = pred_dir / str(sc.seed)
        pred = preds[sc.seed]
        e = (pred.astype(np.float64) - sc.depth_gt.data) ** 2
        io.write_gt01(d / "depth.gt01", pred)
        io.write_gt01(d / "uncert.gt01", u_of_error(e, e_all))
        io.write_gt01(d / "mask.gt01", np.ones_like(pred))


def test_evaluate_perfect_uncertainty(tmp_path, small):
    data = synth.read_sceneset(small / "data")
    pd = tmp_path / "perfect"
    _inject(pd, data, lambda e, e_all: np.float32((e - e_all.min()) / (e_all.max() - e_all.min())))
    assert run("evaluate", "--pred-dir", pd, "--data", small / "data", "--out", tmp_path / "ev") == 0
    rows = read_csv(tmp_path / "ev" / "report.csv")
    by = {r["metric"]: r for r in rows}
    assert abs(float(by["nUCE"]["value"])) <= 1e-9
    assert abs(float(by["rmse"]["ause"])) <= 1e-9
    assert (tmp_path / "ev" / "sparsification_perfect.png").stat().st_size > 0


def test_evaluate_is_byte_stable_and_counts_rows(tmp_path, small):
    data = synth.read_sceneset(small / "data")
    _inject(tmp_path / "p1", data, lambda e, _: np.float32(np.sqrt(e) / 10), seed=1)
    _inject(tmp_path / "p2", data, lambda e, _: np.float32(np.random.default_rng(0).random(e.shape)), seed=1)
    args = ["evaluate", "--pred-dir", tmp_path / "p1", tmp_path / "p2", "--data", small / "data", "--steps", 10]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    rows = read_csv(tmp_path / "a" / "report.csv")
    assert len(rows) == 2 * 3 + 2
    spars = read_csv(tmp_path / "a" / "sparsification.csv")
    assert len(spars) == 2 * 3 * (3 + 1) * 11
    assert set(spars[0]) == {"fraction", "oracle", "actual", "random", "metric", "method", "image_id"}


def test_evaluate_missing_scene_is_named(tmp_path, small, capsys):
    data = synth.read_sceneset(small / "data")
    _inject(tmp_path / "p", data, lambda e, _: np.float32(np.zeros_like(e)))
    gone = data.seeds[1]
    (tmp_path / "p" / str(gone) / "depth.gt01").unlink()
    assert run("evaluate", "--pred-dir", tmp_path / "p", "--data", small / "data", "--out", tmp_path / "o") == 2
    assert str(gone) in capsys.readouterr().err


# ---- compare ------------------------------------------------------------------------

def test_compare_single_method(tmp_path, small):
    assert run("compare", "--model", small / "model", "--data", small / "data", "--methods", "post",
               "--out", tmp_path / "c") == 0
    rows = read_csv(tmp_path / "c" / "table.csv")
    assert len(rows) == 1 and rows[0]["method"] == "post"
    assert list(rows[0]) == cli.TABLE_COLUMNS


def test_compare_rows_sorted_and_failure_named(tmp_path, small, capsys):
    assert run("compare", "--model", small / "model", "--data", small / "data",
               "--methods", "var:hflip,gray", "ours", "post", "--out", tmp_path / "c") == 0
    assert [r["method"] for r in read_csv(tmp_path / "c" / "table.csv")] == ["ours", "post", "var:hflip,gray"]
    assert run("compare", "--model", small / "model", "--data", small / "data",
               "--methods", "post", "sigma", "--out", tmp_path / "d") == 2
    assert "'sigma'" in capsys.readouterr().err
