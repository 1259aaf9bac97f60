"""End-to-end command-line pipeline: synth -> train -> prune -> register -> eval."""

import json

import numpy as np
import pytest

from defreg.cli import main
from defreg.scnet.model import ScNetConfig, ScNetModel
from defreg.scnet.params_io import save_params

SCENE_SPEC = {
    "point_count": 60,
    "surface": "plane-grid",
    "warp_kind": "smooth-graph",
    "warp_magnitude": [0.2, 0.05],
    "inlier_ratio": 0.5,
    "inlier_noise_std": 0.005,
    "seed": 0,
}

SMALL_CONFIG = {
    "feature_dim": 16,
    "num_blocks": 1,
    "units_per_block": 1,
    "num_groups": 2,
    "epochs": 2,
    "learning_rate": 3e-3,
}


def _write_json(path, data):
    path.write_text(json.dumps(data) + "\n")
    return str(path)


@pytest.fixture
def spec_path(tmp_path):
    return _write_json(tmp_path / "spec.json", SCENE_SPEC)


@pytest.fixture
def config_path(tmp_path):
    return _write_json(tmp_path / "config.json", SMALL_CONFIG)


# ------------------------------------------------------------------ synth

def test_synth_writes_bundle(tmp_path, spec_path, capsys):
    out = tmp_path / "scene"
    assert main(["synth", spec_path, "--out", str(out)]) == 0
    for name in ("source.ply", "target.ply", "corr.csv", "warp.txt", "spec.json"):
        assert (out / name).is_file()
    message = capsys.readouterr().out
    assert "60 correspondences" in message
    assert "30 inliers" in message


def test_synth_reruns_byte_identical(tmp_path, spec_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "5", "synth", spec_path, "--out", str(a)]) == 0
    assert main(["--seed", "5", "synth", spec_path, "--out", str(b)]) == 0
    for name in ("source.ply", "target.ply", "corr.csv", "warp.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_rejects_bad_ratio(tmp_path, capsys):
    spec = dict(SCENE_SPEC, inlier_ratio=1.5)
    path = _write_json(tmp_path / "bad.json", spec)
    assert main(["synth", path, "--out", str(tmp_path / "x")]) == 2
    assert "inlier_ratio" in capsys.readouterr().err


def test_synth_rejects_malformed_spec(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{oops")
    assert main(["synth", str(path), "--out", str(tmp_path / "x")]) == 4
    assert "bad scene spec" in capsys.readouterr().err


def test_missing_input_file_is_io_error(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 4
    assert "i/o error" in capsys.readouterr().err


# --------------------------------------------------------------- pipeline

@pytest.fixture
def mini_dataset(tmp_path, spec_path):
    data = tmp_path / "data"
    for i in range(3):
        code = main(["--seed", str(100 + i), "synth", spec_path,
                     "--out", str(data / f"scene{i}")])
        assert code == 0
    return data


def test_full_pipeline(tmp_path, mini_dataset, config_path, capsys):
    model_path = tmp_path / "model.bin"
    assert main(["--config", config_path, "train", "--data", str(mini_dataset),
                 "--out", str(model_path)]) == 0
    assert model_path.is_file()
    loss_lines = (tmp_path / "model.bin.loss.csv").read_text().splitlines()
    assert loss_lines[0] == "epoch,mean_loss,mean_cls,mean_con,lr"
    assert len(loss_lines) == 1 + SMALL_CONFIG["epochs"]
    out = capsys.readouterr().out
    assert "trained on 3 scenes" in out

    scene = mini_dataset / "scene0"
    pruned = tmp_path / "pruned.csv"
    assert main(["--config", config_path, "prune", "--corr", str(scene / "corr.csv"),
                 "--model", str(model_path), "--out", str(pruned),
                 "--scores", str(tmp_path / "scores.csv")]) == 0
    out = capsys.readouterr().out
    assert "precision" in out and "recall" in out
    assert pruned.is_file()
    score_lines = (tmp_path / "scores.csv").read_text().splitlines()
    assert score_lines[0] == "index,score"
    assert len(score_lines) == 61  # one score per input correspondence

    warp = tmp_path / "warp.txt"
    trace = tmp_path / "trace.csv"
    assert main(["--config", config_path, "register", "--corr", str(pruned),
                 "--source", str(scene / "source.ply"), "--out", str(warp),
                 "--warped", str(tmp_path / "warped.ply"), "--trace", str(trace),
                 "--gt", str(scene / "warp.txt")]) == 0
    out = capsys.readouterr().out
    assert "EPE vs ground truth:" in out
    assert warp.is_file() and (tmp_path / "warped.ply").is_file()

    metrics_csv = tmp_path / "metrics.csv"
    svg = tmp_path / "hist.svg"
    assert main(["eval", "--pair", str(warp), str(scene / "warp.txt"),
                 str(scene / "source.ply"), "--out-csv", str(metrics_csv),
                 "--histogram", str(svg), "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "EPE" in out  # table header
    assert "cost trace OK" in out
    assert metrics_csv.read_text().startswith("scene,point_count,epe")
    assert svg.read_text().startswith("<svg")


def test_train_rerun_is_byte_identical(tmp_path, mini_dataset, config_path):
    m1, m2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
    for path in (m1, m2):
        assert main(["--config", config_path, "train", "--data", str(mini_dataset),
                     "--out", str(path)]) == 0
    assert m1.read_bytes() == m2.read_bytes()
    assert (tmp_path / "m1.bin.loss.csv").read_bytes() == (tmp_path / "m2.bin.loss.csv").read_bytes()


def test_train_requires_labeled_bundles(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "empty"), "--out",
                 str(tmp_path / "m.bin")]) == 4
    assert "no such dataset directory" in capsys.readouterr().err


def test_eval_pools_multiple_pairs(tmp_path, mini_dataset, capsys):
    scene = mini_dataset / "scene1"
    args = ["eval"]
    for _ in range(2):
        args += ["--pair", str(scene / "warp.txt"), str(scene / "warp.txt"),
                 str(scene / "source.ply")]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "pooled" in out
    assert "0.000" in out  # est == gt: EPE displays as 0.000


def test_eval_rejects_increasing_trace(tmp_path, mini_dataset, capsys):
    scene = mini_dataset / "scene0"
    trace = tmp_path / "bad-trace.csv"
    trace.write_text("iteration,cost\n0,1.0\n1,2.0\n")
    assert main(["eval", "--pair", str(scene / "warp.txt"), str(scene / "warp.txt"),
                 str(scene / "source.ply"), "--trace", str(trace)]) == 2
    assert "cost trace increases" in capsys.readouterr().err


def test_eval_rejects_foreign_trace_file(tmp_path, mini_dataset, capsys):
    scene = mini_dataset / "scene0"
    trace = tmp_path / "not-a-trace.csv"
    trace.write_text("something,else\n")
    assert main(["eval", "--pair", str(scene / "warp.txt"), str(scene / "warp.txt"),
                 str(scene / "source.ply"), "--trace", str(trace)]) == 4


def test_prune_rejects_mismatched_model(tmp_path, mini_dataset, config_path, capsys):
    other = ScNetModel(ScNetConfig(feature_dim=8, init_widths=(8, 8, 8),
                                   head_widths=(8, 4, 1), num_blocks=1,
                                   units_per_block=1, num_groups=2))
    model_path = tmp_path / "other.bin"
    save_params(model_path, other)
    scene = mini_dataset / "scene0"
    assert main(["--config", config_path, "prune", "--corr", str(scene / "corr.csv"),
                 "--model", str(model_path), "--out", str(tmp_path / "p.csv")]) == 2
    assert "descriptor" in capsys.readouterr().err


# -------------------------------------------------------------- utilities

def test_threads_flag_validated(tmp_path, spec_path, capsys):
    assert main(["--threads", "0", "synth", spec_path, "--out", str(tmp_path / "s")]) == 2
    assert "--threads" in capsys.readouterr().err
    assert main(["--threads", "2", "synth", spec_path, "--out", str(tmp_path / "s")]) == 0


def test_bad_config_file(tmp_path, spec_path, capsys):
    cfg = _write_json(tmp_path / "cfg.json", {"learning_rte": 0.1})
    assert main(["--config", cfg, "synth", spec_path, "--out", str(tmp_path / "s")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "max relative error" in out


def test_inspect_graph(tmp_path, spec_path, capsys):
    scene = tmp_path / "scene"
    assert main(["synth", spec_path, "--out", str(scene)]) == 0
    capsys.readouterr()
    assert main(["inspect-graph", str(scene / "source.ply")]) == 0
    dump = capsys.readouterr().out
    assert "nodes" in dump
    assert main(["inspect-graph", str(scene / "corr.csv"), "--coverage", "0.1"]) == 0
