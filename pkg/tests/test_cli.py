import csv
import json
from pathlib import Path

import numpy as np
import pytest

import tabwaker.cli as cli
from tabwaker.cli import main
from tabwaker.config import ConfigError, parse_config, plan_runs
from tabwaker.evaluation import FuzzSummary

CONFIG = """\
family:
  name: slip-grid
  sizes: [3, 4]
  slips: [0.0, 0.2]
  ood_sizes: [5]
sampler:
  strategy: [waker-m, dr]
trainer:
  total_episodes: 12
  episode_length: 10
  imagine_rollouts: 2
  checkpoint_interval: 2
eval:
  n_eval: 20
seeds: [0, 1]
output: {out}
"""


def write_config(tmp_path, text=CONFIG, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text.format(out=tmp_path / "runs"))
    return path


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One 2 x 2 experiment, trained and evaluated at every checkpoint."""
    tmp = tmp_path_factory.mktemp("exp")
    cfg = write_config(tmp)
    assert main(["run", "--config", str(cfg)]) == 0
    runs = sorted(p.parent for p in (tmp / "runs").glob("*/seed*/manifest.json"))
    assert main(["eval", *map(str, runs), "--checkpoint", "all"]) == 0
    return tmp, cfg, runs


class TestRun:
    def test_fan_out(self, finished):
        _, _, runs = finished
        assert [r.relative_to(r.parents[1]).as_posix() for r in runs] == [
            "dr/seed0", "dr/seed1", "waker-m/seed0", "waker-m/seed1"]
        for r in runs:
            manifest = json.loads((r / "manifest.json").read_text())
            assert manifest["seed"] in (0, 1)
            assert len(manifest["config_hash"]) == 64
            assert manifest["checkpoints"] == [2, 4, 6, 8, 10, 12]
            assert (r / "steps.csv").exists() and (r / "config.json").exists()

    def test_refuses_rerun(self, finished, capsys):
        _, cfg, runs = finished
        before = (runs[0] / "steps.csv").read_bytes()
        assert main(["run", "--config", str(cfg)]) == 1
        assert "--overwrite" in capsys.readouterr().err
        assert (runs[0] / "steps.csv").read_bytes() == before

    def test_overwrite_reproduces(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--seeds", "3"]) == 0
        steps = tmp_path / "runs" / "dr" / "seed3" / "steps.csv"
        first = steps.read_bytes()
        assert main(["run", "--config", str(cfg), "--seeds", "3", "--overwrite"]) == 0
        assert steps.read_bytes() == first

    def test_unknown_key_rejected_before_work(self, tmp_path, capsys):
        cfg = write_config(tmp_path, CONFIG.replace("  imagine_rollouts: 2", "  imagine_rollouts: 2\n  bogus: 1"))
        assert main(["run", "--config", str(cfg)]) == 1
        assert "exp.yaml:12: trainer.bogus: unknown key" in capsys.readouterr().err
        assert not (tmp_path / "runs").exists()

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == 1

    def test_parallel_jobs_match_serial(self, tmp_path, finished):
        _, _, runs = finished
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--jobs", "2"]) == 0
        for r in runs:
            other = tmp_path / "runs" / r.parent.name / r.name / "steps.csv"
            assert other.read_bytes() == (r / "steps.csv").read_bytes()

    def test_sweep(self, tmp_path):
        text = CONFIG.replace("seeds: [0, 1]", "seeds: [0]\nsweep:\n  eta: [0.5, 2.0]\n  p_dr: [0.1]")
        text = text.replace("strategy: [waker-m, dr]", "strategy: waker-m").replace("total_episodes: 12", "total_episodes: 2")
        cfg = write_config(tmp_path, text)
        assert main(["sweep", "--config", str(cfg)]) == 0
        names = sorted(p.name for p in (tmp_path / "runs").iterdir())
        assert names == ["waker-m-eta0.5-p_dr0.1", "waker-m-eta2-p_dr0.1"]
        resolved = json.loads((tmp_path / "runs" / names[0] / "seed0" / "config.json").read_text())
        assert resolved["sampler"]["eta"] == 0.5 and resolved["sampler"]["p_dr"] == 0.1


class TestEval:
    def test_every_checkpoint_evaluated(self, finished):
        _, _, runs = finished
        assert len(list((runs[0] / "eval").iterdir())) == 6

    def test_latest(self, finished, tmp_path):
        _, _, runs = finished
        out = cli.evaluate_run(runs[0], "latest")
        assert [p.name for p in out] == ["ckpt_000012"]

    def test_every_two(self, finished):
        _, _, runs = finished
        paths = sorted((runs[0] / "checkpoints").glob("*.npz"))
        assert len(paths) == 6
        assert [p.stem for p in cli.select_checkpoints(paths, "every-2")] == [
            "ckpt_000004", "ckpt_000008", "ckpt_000012"]
        assert [p.stem for p in cli.select_checkpoints(paths, "6")] == ["ckpt_000006"]

    def test_regenerated_bytes_identical(self, finished):
        _, _, runs = finished
        report = runs[1] / "eval" / "ckpt_000012" / "report.csv"
        first = report.read_bytes()
        assert main(["eval", str(runs[1]), "--checkpoint", "latest"]) == 0
        assert report.read_bytes() == first

    def test_missing_checkpoints(self, tmp_path):
        (tmp_path / "checkpoints").mkdir()
        (tmp_path / "config.json").write_text("{}")
        with pytest.raises(KeyError):
            cli.evaluate_run(tmp_path)
        assert main(["eval", str(tmp_path / "nowhere")]) == 2

    def test_bad_selector(self, finished):
        _, _, runs = finished
        with pytest.raises(ConfigError):
            cli.select_checkpoints(sorted((runs[0] / "checkpoints").glob("*.npz")), "newest")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestReport:
    def test_single_run(self, finished, tmp_path):
        _, _, runs = finished
        assert main(["report", str(runs[2]), "--out", str(tmp_path / "rep")]) == 0
        rows = read_csv(tmp_path / "rep" / "comparison.csv")
        assert {r["strategy"] for r in rows} == {"waker-m"}
        assert read_csv(tmp_path / "rep" / "wins_vs_dr.csv") == []

    def test_paired_wins_in_range(self, finished, tmp_path):
        _, _, runs = finished
        assert main(["report", *map(str, runs), "--out", str(tmp_path / "rep")]) == 0
        wins = read_csv(tmp_path / "rep" / "wins_vs_dr.csv")
        assert wins and all(r["strategy"] == "waker-m" for r in wins)
        assert all(0 <= int(r["wins"]) <= int(r["n_pairs"]) == 2 for r in wins)
        metrics = {(r["task"], r["split"], r["metric"]) for r in wins}
        assert ("reach-goal", "train", "cvar_regret") in metrics
        assert ("", "train", "max_wm_error") in metrics

    def test_heatmap_recount(self, finished, tmp_path):
        _, _, runs = finished
        assert main(["report", *map(str, runs), "--out", str(tmp_path / "rep"), "--buckets", "4"]) == 0
        for r in runs:
            manifest = json.loads((r / "manifest.json").read_text())
            heat = read_csv(tmp_path / "rep" / "heatmaps" / f"{manifest['name']}_seed{manifest['seed']}.csv")
            steps = read_csv(r / "steps.csv")
            assert len(heat) == 4
            for row in heat:
                first, last = int(row["first_episode"]), int(row["last_episode"])
                in_bucket = [s for s in steps if first <= int(s["episode"]) <= last]
                counts = {k: int(v) for k, v in row.items() if k.startswith("size")}
                assert sum(counts.values()) == len(in_bucket)
                for label, n in counts.items():
                    assert n == sum(s["theta"] == label for s in in_bucket)
            assert sum(int(row["last_episode"]) - int(row["first_episode"]) + 1 for row in heat) == len(steps)

    def test_refuses_mixed_families(self, finished, tmp_path):
        _, _, runs = finished
        other_cfg = write_config(tmp_path, CONFIG.replace("slips: [0.0, 0.2]", "slips: [0.0, 0.1]")
                                 .replace("seeds: [0, 1]", "seeds: [0]")
                                 .replace("total_episodes: 12", "total_episodes: 2"))
        assert main(["run", "--config", str(other_cfg)]) == 0
        other = tmp_path / "runs" / "dr" / "seed0"
        assert main(["eval", str(other)]) == 0
        assert main(["report", str(runs[0]), str(other), "--out", str(tmp_path / "rep")]) == 2

    def test_unevaluated_run(self, tmp_path):
        cfg = write_config(tmp_path, CONFIG.replace("seeds: [0, 1]", "seeds: [0]")
                           .replace("total_episodes: 12", "total_episodes: 2"))
        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["report", str(tmp_path / "runs" / "dr" / "seed0"), "--out", str(tmp_path / "r")]) == 2

    def test_verify_bounds(self, capsys):
        assert main(["report", "--verify-bounds", "--fuzz-instances", "50"]) == 0
        assert "violations 0" in capsys.readouterr().out

    def test_verify_bounds_violation_exit_code(self, monkeypatch):
        bad = FuzzSummary(5, 1, 0, -0.1, 0.0, 0.0, 0.0)
        monkeypatch.setattr(cli, "bound_fuzz", lambda *a, **k: bad)
        assert main(["report", "--verify-bounds"]) == 3

    def test_report_needs_input(self):
        assert main(["report"]) == 1


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("{}")
        assert cfg.strategies == ["waker-m"] and cfg.seeds == [0]
        assert cfg.trainer.total_episodes == 2000 and cfg.trainer.episode_length == 50

    @pytest.mark.parametrize("text,fragment", [
        ("bogus: 1\n", "<config>:1: bogus: unknown key"),
        ("sampler:\n  strategy: plr\n", "<config>:2: sampler.strategy"),
        ("family:\n  name: maze\n", "<config>:2: family.name"),
        ("seeds: [1, 1]\n", "duplicate seeds"),
        ("trainer:\n  horizon: 0\n", "<config>:1: trainer"),
        ("family: [1, 2\n", "malformed YAML"),
    ])
    def test_diagnostics(self, text, fragment):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert fragment in str(exc.value)

    def test_plan_fan_out(self, tmp_path):
        cfg = parse_config(CONFIG.format(out=tmp_path))
        specs = plan_runs(cfg)
        assert len(specs) == 4
        assert {(s.name, s.seed) for s in specs} == {(n, k) for n in ("waker-m", "dr") for k in (0, 1)}

    def test_sweep_without_section(self):
        with pytest.raises(ConfigError):
            plan_runs(parse_config("{}"), sweep=True)


def test_usage_error():
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_console_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "tabwaker", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "report" in out.stdout
