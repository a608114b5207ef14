import csv
import json
import os

import numpy as np
import pytest

from factored_mcts.cli import main, parse_ci

TINY_CONFIG = {
    "env": "cmab",
    "seeds": [0],
    "search": {"num_simulations": 2},
    "train": {
        "batch_size": 4,
        "unroll_steps": 2,
        "td_steps": 2,
        "total_steps": 6,
        "min_buffer": 30,
        "buffer_capacity": 200,
        "collect_interval": 3,
        "target_interval": 4,
    },
    "model": {"latent_width": 8, "hidden_width": 12},
    "eval_interval": 3,
    "eval_episodes": 2,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


def test_train_then_eval_pipeline(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config_path, "--out", out, "--quiet"]) == 0
    assert os.path.exists(os.path.join(out, "config.json"))
    assert os.path.exists(os.path.join(out, "final.ckpt"))
    metrics = os.path.join(out, "metrics.csv")
    with open(metrics) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2  # eval at steps 3 and 6
    assert rows[0]["env"] == "cmab"
    lo, hi = parse_ci(rows[0]["episodic_return_ci"])
    assert lo <= float(rows[0]["episodic_return_mean"]) <= hi

    rc = main(["eval", "--checkpoint", os.path.join(out, "final.ckpt"),
               "--env", "cmab", "--episodes", "2", "--seeds", "0", "1"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "eval_cmab.csv"))
    captured = capsys.readouterr()
    assert "return" in captured.out


def test_metrics_csv_round_trips(config_path, tmp_path):
    out = str(tmp_path / "run")
    main(["train", "--config", config_path, "--out", out, "--quiet"])
    path = os.path.join(out, "metrics.csv")
    with open(path) as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        assert int(row["step"]) > 0
        for key in ("episodic_return_mean", "reduction_pct", "loss_total",
                    "loss_policy", "loss_value", "loss_reward", "loss_recon",
                    "loss_sparsity", "shd_mean"):
            float(row[key])  # parses back
        parse_ci(row["episodic_return_ci"])


def test_vanilla_flag_recorded_in_mode(config_path, tmp_path):
    out = str(tmp_path / "vrun")
    assert main(["train", "--config", config_path, "--out", out,
                 "--vanilla", "--quiet"]) == 0
    with open(os.path.join(out, "config.json")) as f:
        resolved = json.load(f)
    assert resolved["mode"] == "vanilla"
    assert resolved["search"]["vanilla_mode"] is True
    assert resolved["train"]["mask_mode"] == "ones"


def test_unknown_env_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": "sokoban"}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": "cmab", "train": {"sparsity": 1.0}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_unknown_flag_exits_2(config_path, tmp_path):
    assert main(["train", "--config", config_path, "--out",
                 str(tmp_path / "x"), "--warp-speed"]) == 2


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--env", "cmab"]) == 2


def test_sweep_creates_run_per_value(tmp_path):
    cfg = dict(TINY_CONFIG)
    cfg["eval_interval"] = 6
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "sweep_out")
    rc = main(["sweep", "--config", str(path), "--param", "sparsity_lambda",
               "--values", "0,0.01", "--out", out, "--quiet"])
    assert rc == 0
    dirs = sorted(os.listdir(out))
    assert len(dirs) == 2
    for d, expected in zip(dirs, (0, 0.01)):
        with open(os.path.join(out, d, "config.json")) as f:
            resolved = json.load(f)
        assert resolved["train"]["sparsity_coef"] == expected


def test_export_metrics_json_and_csv(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    main(["train", "--config", config_path, "--out", out, "--quiet"])
    assert main(["export-metrics", "--run", out, "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload) == 2
    assert payload[0]["step"] == 3
    assert isinstance(payload[0]["loss_total"], float)
    assert main(["export-metrics", "--run", out, "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("step,seed,env")


def test_shd_eval_command(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    main(["train", "--config", config_path, "--out", out, "--quiet"])
    rc = main(["shd-eval", "--checkpoint", os.path.join(out, "final.ckpt"),
               "--env", "cmab", "--episodes", "2"])
    assert rc == 0
    assert "mean shd" in capsys.readouterr().out
    assert main(["shd-eval", "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--env", "gridkey-k2"]) == 2
