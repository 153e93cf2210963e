import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tabwaker.evaluation as evaluation
from tabwaker.curriculum import SamplerConfig
from tabwaker.envs import EnvironmentFamily, build_family
from tabwaker.evaluation import (
    BoundViolation,
    EvalConfig,
    bound_fuzz,
    cvar,
    derive_task_policy,
    evaluate_checkpoint,
    evaluate_model,
)
from tabwaker.exploration import ExplorationConfig, make_random_policy
from tabwaker.mdp import proposition1_gap, regret
from tabwaker.trainer import TrainerConfig, run
from tabwaker.world_model import EnsembleWorldModel


def exact_model(family, kappa=1e-9, per_row=30, seed=0):
    """Deterministic family: every row observed many times, tiny smoothing."""
    rng = np.random.default_rng(seed)
    model = EnsembleWorldModel(family.space, family.num_actions, prior_pseudocount=kappa, rng_seed=seed)
    batches = []
    for theta in family.all_params:
        mdp = family.mdp(theta)
        off = family.space.slice(theta).start
        for s in range(mdp.num_states):
            for a in range(mdp.num_actions):
                nxt = rng.choice(mdp.num_states, size=per_row, p=mdp.transition[s, a])
                batches.append(np.column_stack([np.full(per_row, s + off), np.full(per_row, a), nxt + off]))
    model.observe(np.concatenate(batches))
    return model


@pytest.fixture(scope="module")
def det_family():
    return build_family({"name": "slip-grid", "sizes": [3, 4, 5], "slips": [0.0], "ood_sizes": [6]})


@pytest.fixture(scope="module")
def mid_run(small_family):
    return run(small_family, SamplerConfig("waker-m"),
               TrainerConfig(total_episodes=40, episode_length=20, checkpoint_interval=20, seed=3),
               ExplorationConfig())


class TestCvar:
    def test_examples(self):
        assert abs(cvar(np.arange(1, 101), 0.1) - 5.5) <= 1e-9
        assert cvar([3.0] * 7, 0.1) == 3.0
        assert abs(cvar([4.0, 1.0, 7.0], 1.0) - 4.0) <= 1e-9

    def test_ceiling(self):
        assert cvar([5.0, 1.0, 3.0], 0.5) == 2.0  # ceil(1.5) = 2 smallest

    def test_errors(self):
        with pytest.raises(ValueError):
            cvar([], 0.1)
        with pytest.raises(ValueError):
            cvar([1.0], 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 1), st.floats(0.01, 1))
    def test_monotone_in_alpha(self, values, a1, a2):
        lo, hi = sorted((a1, a2))
        assert cvar(values, lo) <= cvar(values, hi) + 1e-6


class TestDeriveTaskPolicy:
    def test_exact_model_has_no_regret(self, det_family):
        model = exact_model(det_family)
        tol = 1e-11
        for task in det_family.task_rewards:
            policy = derive_task_policy(model, det_family, task, tol)
            for theta in det_family.all_params:
                sl = det_family.space.slice(theta)
                r = regret(policy[sl], det_family.mdp(theta), det_family.reward(theta, task))
                assert r <= 2 * tol / (1 - det_family.discount)

    def test_constant_reward_untrained(self, small_family):
        fam = EnvironmentFamily(
            name="const",
            param_grid=small_family.param_grid,
            generator=small_family.generator,
            dr_distribution=small_family.dr_distribution,
            hardest=small_family.hardest,
            complex_subset=[],
            ood_params=small_family.ood_params,
            task_rewards={"const": lambda t: np.full((small_family.mdp(t).num_states, 4), 0.5)},
        )
        model = EnsembleWorldModel(fam.space, fam.num_actions)
        policy = derive_task_policy(model, fam, "const")
        for theta in fam.all_params:
            sl = fam.space.slice(theta)
            assert abs(regret(policy[sl], fam.mdp(theta), fam.reward(theta, "const"))) <= 1e-9

    def test_mid_training_within_bound(self, small_family, mid_run):
        ckpt = mid_run.checkpoints[0]
        model = ckpt.restore_model(small_family)
        for task in small_family.task_rewards:
            policy = derive_task_policy(model, small_family, task)
            for theta in small_family.all_params:
                sl = small_family.space.slice(theta)
                true = small_family.mdp(theta)
                reward = small_family.reward(theta, task)
                lhs, rhs = proposition1_gap(model.model_mdp(small_family, theta), true, reward)
                assert regret(policy[sl], true, reward) <= rhs + 1e-9
                assert abs(regret(policy[sl], true, reward) - lhs) <= 1e-8

    def test_unknown_task(self, small_family):
        with pytest.raises(KeyError):
            derive_task_policy(EnsembleWorldModel(small_family.space, 4), small_family, "fetch")


class TestEvaluateCheckpoint:
    def test_perfect_model(self, det_family):
        model = exact_model(det_family)
        policy = make_random_policy(det_family.space, det_family.num_actions)
        report = evaluate_model(model, policy, det_family, EvalConfig(n_eval=30))
        for task in report.tasks:
            for split in ("train", "ood"):
                assert abs(report.aggregates(task, split)["cvar_regret"]) <= 1e-8

    def test_enumeration_is_deterministic(self, small_family, mid_run):
        cfg = EvalConfig(enumerate=True)
        ckpt = mid_run.checkpoints[-1]
        a = evaluate_checkpoint(ckpt, small_family, cfg, np.random.default_rng(0))
        b = evaluate_checkpoint(ckpt, small_family, cfg, np.random.default_rng(12345))
        assert a.drawn == small_family.param_grid
        assert a.report_rows() == b.report_rows() and a.summary_rows() == b.summary_rows()

    def test_seeded_determinism(self, small_family, mid_run):
        cfg = EvalConfig(n_eval=50)
        ckpt = mid_run.checkpoints[-1]
        a = evaluate_checkpoint(ckpt, small_family, cfg, np.random.default_rng(7))
        b = evaluate_checkpoint(ckpt, small_family, cfg, np.random.default_rng(7))
        assert a.drawn == b.drawn and a.summary_rows() == b.summary_rows()

    def test_regret_matches_recomputation(self, small_family, mid_run):
        ckpt = mid_run.checkpoints[-1]
        report = evaluate_checkpoint(ckpt, small_family, EvalConfig(), np.random.default_rng(0))
        model = ckpt.restore_model(small_family)
        rng = np.random.default_rng(1)
        tasks = list(small_family.task_rewards)
        for _ in range(10):
            theta = small_family.all_params[rng.integers(len(small_family.all_params))]
            task = tasks[rng.integers(len(tasks))]
            learned = model.model_mdp(small_family, theta)
            reward = small_family.reward(theta, task)
            _, greedy = evaluation.value_iteration(learned, reward, tol=1e-11)
            expected = regret(greedy, small_family.mdp(theta), reward)
            assert abs(report.per_theta[task][theta].regret - expected) <= 1e-8

    def test_report_invariants(self, small_family, mid_run):
        for ckpt in mid_run.checkpoints:
            report = evaluate_checkpoint(ckpt, small_family, EvalConfig(n_eval=40), np.random.default_rng(0))
            for task in report.tasks:
                agg = report.aggregates(task, "train")
                assert agg["cvar_return"] <= agg["mean_return"] + 1e-12
                assert agg["max_regret"] >= agg["mean_regret"] - 1e-12
                for res in report.per_theta[task].values():
                    assert res.regret >= -1e-6
                    assert res.regret <= res.bound + 1e-9
                per = report.per_theta[task]
                assert max(r.regret for r in per.values()) <= max(r.bound for r in per.values()) + 1e-9
            assert all(report.max_wm_error >= e for e in report.wm_error.values())
            assert set(report.wm_error) == set(small_family.param_grid)

    def test_write_schemas(self, small_family, mid_run, tmp_path):
        report = evaluate_checkpoint(mid_run.checkpoints[-1], small_family, EvalConfig(n_eval=10))
        report.write(tmp_path)
        with open(tmp_path / "report.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["checkpoint", "task", "theta", "metric", "value"]
        assert {r[3] for r in rows[1:]} == {"return", "regret", "prop1_bound", "wm_error"}
        with open(tmp_path / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["checkpoint", "task", "split", "metric", "value"]
        assert {r[2] for r in rows[1:]} == {"train", "ood"}

    def test_empty_ood_split(self, det_family):
        fam = build_family({"name": "slip-grid", "sizes": [3], "slips": [0.0], "ood_sizes": []})
        model = EnsembleWorldModel(fam.space, fam.num_actions)
        report = evaluate_model(model, make_random_policy(fam.space, 4), fam, EvalConfig(n_eval=5))
        assert report.aggregates("reach-goal", "ood") == {}


class TestBoundFuzz:
    def test_no_violations(self):
        summary = bound_fuzz(100, max_states=6, rng=np.random.default_rng(0))
        assert summary.passed
        assert summary.lemma_violations == summary.prop1_violations == 0

    def test_identical_models(self):
        summary = bound_fuzz(50, rng=np.random.default_rng(1), identical=True)
        assert summary.worst_lemma_slack == summary.median_lemma_slack == 0.0
        assert abs(summary.worst_prop1_slack) <= 1e-9 and abs(summary.median_prop1_slack) <= 1e-9

    def test_slack_positive(self):
        summary = bound_fuzz(100, rng=np.random.default_rng(2))
        assert np.isfinite(summary.median_lemma_slack) and summary.median_lemma_slack > 0
        assert np.isfinite(summary.median_prop1_slack) and summary.median_prop1_slack > 0
        assert summary.worst_lemma_slack >= -1e-9

    def test_violation_is_loud(self, monkeypatch):
        monkeypatch.setattr(evaluation, "simulation_lemma_gap", lambda *a: (1.0, 0.0))
        summary = bound_fuzz(3, rng=np.random.default_rng(0))
        assert not summary.passed and summary.lemma_violations == 3
        with pytest.raises(BoundViolation):
            bound_fuzz(3, rng=np.random.default_rng(0), raise_on_violation=True)

    def test_requires_instances(self):
        with pytest.raises(ValueError):
            bound_fuzz(0)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(n_eval=0)
    with pytest.raises(ValueError):
        EvalConfig(alpha=0.0)
