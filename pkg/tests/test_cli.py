import json

import numpy as np
import pytest

from scene_action_vad import cli, rkm

TINY_CFG = {
    "seed": 3,
    "world": {"n_scenes": 3, "n_actions": 4, "abnormal_fraction": 0.4},
    "sample": {"videos_per_class": 4, "clips_per_video": 4, "test_videos_per_class": 2},
    "rkm": {"theta_fn": 4, "theta_fa": 4},
    "bags": {"N": 4, "K": 2},
    "train": {"epochs": 2, "batch_size": 2, "lr": 0.001},
    "refine": {"iterations": 2, "cross_actions": 2},
    "refine_train": {"epochs": 1, "batch_size": 2, "lr": 0.001},
    "unsup_train": {"epochs": 1, "batch_size": 32, "lr": 0.001},
    "dims": {"h": 8, "h_g": 4, "h_t": 6, "h_p": 3, "h_f": 8, "h_d": 8},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CFG))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_unknown_and_missing_command(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err
    assert run() == 2


def test_bad_config_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rkm": {"theta_zz": 3}}))
    assert run("synth", "--config", p, "--out-dir", tmp_path) == 1
    assert "rkm.theta_zz" in capsys.readouterr().err
    p.write_text(json.dumps({"bogus": {}}))
    assert run("synth", "--config", p, "--out-dir", tmp_path) == 1
    assert "bogus" in capsys.readouterr().err
    p.write_text(json.dumps({"train": {"epochs": 1.5}}))
    assert run("train", "--config", p, "--out-dir", tmp_path) == 1
    assert "train.epochs" in capsys.readouterr().err
    p.write_text(json.dumps({"refine": {"beta1": 0.9}}))
    assert run("synth", "--config", p, "--out-dir", tmp_path) == 1


def test_load_config_defaults_and_overrides():
    cfg = cli.load_config(None, {"seed": 7, "iterations": 4})
    assert cfg["seed"] == 7 and cfg["refine"].iterations == 4
    assert cfg["rkm"].seed == 7 and cfg["train"].seed == 7 and cfg["refine_train"].seed == 8
    assert cfg["rkm"].theta_fn == 15 and cfg["refine"].beta2 == 0.8


def test_eval_perfect_dump(tmp_path, capsys):
    d = tmp_path / "scores"
    d.mkdir()
    (d / "v.tsv").write_text("frame_index\tscore\tlabel\n0\t0.1\t0\n1\t0.2\t0\n2\t0.9\t1\n")
    assert run("eval", "--scores", d) == 0
    out = capsys.readouterr().out
    assert "AUC = 1.0000" in out and "AP = 1.0000" in out


def test_eval_without_dumps(tmp_path):
    assert run("eval", "--out-dir", tmp_path) == 1


def test_merge_same_graph_is_identity(cfg_file, tmp_path):
    assert run("synth", "--config", cfg_file, "--out-dir", tmp_path) == 0
    assert run("build-kg", "--config", cfg_file, "--out-dir", tmp_path) == 0
    kg = tmp_path / "kg.txt"
    assert run("merge-kg", "--config", cfg_file, "--out-dir", tmp_path, "--other", kg) == 0
    assert (tmp_path / "kg_merged.txt").read_bytes() == kg.read_bytes()
    assert run("update-kg", "--config", cfg_file, "--out-dir", tmp_path,
               "--data", tmp_path / "test.jsonl") == 0
    rkm.load_graph(tmp_path / "kg_updated.txt")


def _pipeline(cfg_file, out, mode="weak"):
    for argv in (("synth",), ("build-kg",), ("train", "--mode", mode), ("refine",), ("score",)):
        if mode == "unsup" and argv[0] == "refine":
            continue
        assert run(*argv, "--config", cfg_file, "--out-dir", out) == 0, argv
    return sorted(p for p in out.rglob("*") if p.is_file())


def test_pipeline_is_deterministic(cfg_file, tmp_path, capsys):
    a = _pipeline(cfg_file, tmp_path / "a")
    b = _pipeline(cfg_file, tmp_path / "b")
    rel = lambda ps, root: [p.relative_to(root) for p in ps]
    assert rel(a, tmp_path / "a") == rel(b, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    names = {p.name for p in a}
    assert {"kg.txt", "stage1.ckpt", "refined.ckpt", "pool_report.tsv", "stage1_loss.tsv"} <= names
    capsys.readouterr()
    assert run("eval", "--out-dir", tmp_path / "a") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("AUC = ") and out[1].startswith("AP = ")


def test_seed_flag_changes_outputs(cfg_file, tmp_path):
    assert run("synth", "--config", cfg_file, "--out-dir", tmp_path / "a") == 0
    assert run("synth", "--config", cfg_file, "--out-dir", tmp_path / "b", "--seed", 4) == 0
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "b" / "train.jsonl").read_bytes()


def test_unsup_pipeline(cfg_file, tmp_path, capsys):
    files = _pipeline(cfg_file, tmp_path, mode="unsup")
    assert "unsup.ckpt" in {p.name for p in files}
    assert run("refine", "--config", cfg_file, "--out-dir", tmp_path, "--mode", "unsup",
               "--ckpt", tmp_path / "unsup.ckpt") == 1
    dumps = sorted((tmp_path / "scores").glob("*.tsv"))
    s = np.concatenate([np.loadtxt(p, skiprows=1, usecols=1) for p in dumps])
    assert s.min() >= 0.0 and s.max() <= 1.0


def test_missing_inputs(tmp_path):
    assert run("build-kg", "--out-dir", tmp_path) == 1
    assert run("update-kg", "--out-dir", tmp_path) == 1
    assert run("merge-kg", "--out-dir", tmp_path) == 1
    assert run("score", "--out-dir", tmp_path) == 1
