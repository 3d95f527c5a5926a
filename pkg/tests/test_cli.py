import csv
import json
import subprocess
import sys

import pytest

from smac_lab import config as cfgmod
from smac_lab.cli import ABLATION_VARIANTS, SUMMARY_COLUMNS, checkpoints, main

TINY = ["--profile", "desk", "--set", "agent.total_steps=200", "--set", "agent.start_learning_step=50",
        "--set", "agent.batch_size=16", "--set", "agent.hidden=[8,8]", "--set", "agent.checkpoint_every=100",
        "--set", "agent.metrics_every=100", "--set", "env.episode_steps=50",
        "--set", "probe.probe_episodes=1", "--set", "probe.n_rollouts=1"]


def _train(tmp_path, capsys, *extra):
    assert main(["train", *TINY, "--out", str(tmp_path), *extra]) == 0
    return tmp_path / capsys.readouterr().out.splitlines()[0].split("/")[-1]


def test_train_layout_and_manifest(tmp_path, capsys):
    run = _train(tmp_path, capsys, "--seed", "7")
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["seed"] == 7
    assert manifest["started"] and manifest["finished"]
    config = cfgmod.from_dict(manifest["config"])
    assert config.agent.total_steps == 200 and config.agent.seed == 7
    assert manifest["config_hash"] == config.content_hash()
    assert cfgmod.from_dict(json.loads(config.to_json())) == config
    assert (run / "metrics.csv").exists() and (run / "reports").is_dir()
    assert [p.name for p in checkpoints(run)] == ["step_100.ckpt", "step_200.ckpt"]
    # a second identical run never overwrites the first
    again = _train(tmp_path, capsys, "--seed", "7")
    assert again != run and again.name.startswith(run.name)
    assert (again / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SMAC_LAB_OUT", str(tmp_path / "envroot"))
    assert main(["train", *TINY]) == 0
    capsys.readouterr()
    assert len(list((tmp_path / "envroot").iterdir())) == 1


def test_config_file_round_trip(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    cfg = cfgmod.apply_overrides(cfgmod.load_profile("desk"), TINY[3::2])
    path.write_text(cfg.to_json())
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    run = tmp_path / "o" / capsys.readouterr().out.splitlines()[0].split("/")[-1]
    assert json.loads((run / "manifest.json").read_text())["config_hash"] == cfg.content_hash()


def test_usage_errors_exit_2(tmp_path, capsys):
    for argv in (["train", "--profile", "desk", "--set", "agent.nope=1", "--out", str(tmp_path)],
                 ["train", "--profile", "desk", "--set", "agent.total_steps", "--out", str(tmp_path)],
                 ["train", "--profile", "desk", "--set", "agent.batch_size=0", "--out", str(tmp_path)]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "unknown config key 'agent.nope'" in err and "agent.total_steps" in err
    assert not any(tmp_path.iterdir())


def test_eval_and_probe_bias(tmp_path, capsys):
    run = _train(tmp_path, capsys)
    assert main(["eval", str(run), "--episodes", "2", "--seed", "5"]) == 0
    first = json.loads(capsys.readouterr().out)
    report = run / "reports" / "eval_step_200_seed5.json"
    text = report.read_text()
    assert main(["eval", str(run), "--episodes", "2", "--seed", "5"]) == 0
    assert report.read_text() == text
    assert first["episodes"] == 2 and set(first) >= {"mean_return", "mean_episode_cost", "violation_counts"}
    with pytest.raises(SystemExit) as exc:
        main(["eval", str(run), "--episodes", "0"])
    assert exc.value.code == 2

    assert main(["probe-bias", str(run)]) == 0
    rows = list(csv.reader((run / "reports" / "bias.csv").open()))
    assert rows[0] == ["step", "estimated_q", "true_q", "bias"]
    assert [int(r[0]) for r in rows[1:]] == [100, 200]
    assert main(["probe-bias", str(run)]) == 0  # idempotent overwrite
    assert list(csv.reader((run / "reports" / "bias.csv").open())) == rows
    metrics = (run / "metrics.csv").read_bytes()
    (run / "checkpoints" / "step_100.ckpt").unlink()
    with pytest.raises(SystemExit) as exc:
        main(["probe-bias", str(run)])
    assert exc.value.code == 2
    assert (run / "metrics.csv").read_bytes() == metrics


def test_missing_run_exit_code(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nope")]) == 4
    assert "manifest.json" in capsys.readouterr().err


def test_ablate_summary_schema(tmp_path, capsys):
    assert main(["ablate", *TINY, "--seeds", "2", "--out", str(tmp_path)]) == 0
    summary = tmp_path / capsys.readouterr().out.splitlines()[-1].split("/", )[-2] / "summary.csv"
    rows = list(csv.DictReader(summary.open()))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert len(rows) == len(ABLATION_VARIANTS) * 2 + len(ABLATION_VARIANTS)
    assert [r["variant"] for r in rows if r["seed"] == "mean"] == list(ABLATION_VARIANTS)
    for r in rows:
        float(r["mean_return"]), float(r["mean_cost"]), float(r["terminal_bias"])


def test_full_profile_values():
    cfg = cfgmod.load_profile("full")
    a = cfg.agent
    assert cfg.env_name == "quad2d" and cfg.env["episode_steps"] == 1000
    assert (a.gamma, a.tau, a.cost_limit, a.batch_size, a.buffer_size) == (0.99, 0.005, 50, 512, 1_000_000)
    assert (a.lr_risky, a.lr_modulator, a.lr_critic, a.lr_cost_critic, a.lr_lambda) == (1e-4,) * 5
    assert (a.total_steps, a.start_learning_step, a.hidden, a.lambda_update_every) == (5_000_000, 100, (256, 256), 1000)
    assert (cfg.probe.probe_step, cfg.probe.probe_episodes, cfg.probe.n_rollouts) == (500, 5, 20)


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "smac_lab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "probe-bias", "ablate"):
        assert cmd in out.stdout
