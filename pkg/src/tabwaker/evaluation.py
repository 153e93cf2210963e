"""Zero-shot task adaptation, robustness metrics, and the bound fuzz suite."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tabwaker.envs import EnvironmentFamily, EnvParams
from tabwaker.mdp import (
    TabularMdp,
    bound_constant,
    expected_model_tv,
    optimal_policy,
    policy_value,
    proposition1_gap,
    random_mdp,
    simulation_lemma_gap,
    value_iteration,
)
from tabwaker.world_model import EnsembleWorldModel, world_model_error

REPORT_HEADER = ["checkpoint", "task", "theta", "metric", "value"]
SUMMARY_HEADER = ["checkpoint", "task", "split", "metric", "value"]


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 100
    alpha: float = 0.1
    tasks: tuple | None = None
    vi_tol: float = 1e-11
    enumerate: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_eval < 1:
            raise ValueError("eval.n_eval must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("eval.alpha must lie in (0, 1]")
        if self.vi_tol <= 0:
            raise ValueError("eval.vi_tol must be positive")
        if self.tasks is not None:
            object.__setattr__(self, "tasks", tuple(self.tasks))


def cvar(values, alpha: float) -> float:
    """Mean of the ceil(alpha * n) smallest values."""
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        raise ValueError("cvar of an empty list")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    k = max(1, math.ceil(alpha * values.size - 1e-9))
    return float(values[:k].mean())


def cvar_upper(values, alpha: float) -> float:
    """Mean of the ceil(alpha * n) largest values (worst tail of a cost)."""
    return -cvar(-np.asarray(values, dtype=float), alpha)


def derive_task_policy(
    model: EnsembleWorldModel, family: EnvironmentFamily, task: str, tol: float = 1e-11
) -> np.ndarray:
    """Optimal policy of the learned model for a task, over every slice.

    The learned dynamics are block diagonal, so per-slice value iteration
    gives the same greedy policy as one solve over the whole space.
    """
    if task not in family.task_rewards:
        raise KeyError(f"unknown task {task!r}")
    policy = np.empty((family.space.total_states, family.num_actions))
    for theta in family.space.thetas:
        sl = family.space.slice(theta)
        policy[sl] = value_iteration(model.model_mdp(family, theta), family.reward(theta, task), tol)[1]
    return policy


@dataclass
class ThetaResult:
    value: float
    regret: float
    bound: float


@dataclass
class EvalReport:
    checkpoint: int
    tasks: list
    drawn: list
    per_theta: dict = field(default_factory=dict)  # task -> {theta: ThetaResult}
    wm_error: dict = field(default_factory=dict)  # theta -> error
    alpha: float = 0.1
    ood_params: list = field(default_factory=list)

    @property
    def max_wm_error(self) -> float:
        return max(self.wm_error.values())

    def aggregates(self, task: str, split: str) -> dict:
        thetas = self.drawn if split == "train" else self.ood_params
        if not thetas:
            return {}
        res = [self.per_theta[task][t] for t in thetas]
        values = [r.value for r in res]
        regrets = [r.regret for r in res]
        return {
            "mean_return": float(np.mean(values)),
            "cvar_return": cvar(values, self.alpha),
            "mean_regret": float(np.mean(regrets)),
            "cvar_regret": cvar_upper(regrets, self.alpha),
            "max_regret": float(np.max(regrets)),
        }

    def report_rows(self) -> list:
        rows = []
        for task in self.tasks:
            for theta, r in self.per_theta[task].items():
                rows += [
                    [self.checkpoint, task, theta.label, "return", repr(r.value)],
                    [self.checkpoint, task, theta.label, "regret", repr(r.regret)],
                    [self.checkpoint, task, theta.label, "prop1_bound", repr(r.bound)],
                ]
        for theta, err in self.wm_error.items():
            rows.append([self.checkpoint, "", theta.label, "wm_error", repr(err)])
        return rows

    def summary_rows(self) -> list:
        rows = []
        for task in self.tasks:
            for split in ("train", "ood"):
                for metric, value in self.aggregates(task, split).items():
                    rows.append([self.checkpoint, task, split, metric, repr(value)])
        rows.append([self.checkpoint, "", "train", "max_wm_error", repr(self.max_wm_error)])
        return rows

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, header, rows in (
            ("report.csv", REPORT_HEADER, self.report_rows()),
            ("summary.csv", SUMMARY_HEADER, self.summary_rows()),
        ):
            with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)


class OptimalValueCache:
    """Optimal values of the true environments, shared across checkpoints."""

    def __init__(self, family: EnvironmentFamily, tol: float = 1e-11):
        self.family = family
        self.tol = tol
        self._cache = {}

    def get(self, theta: EnvParams, task: str) -> tuple[float, np.ndarray]:
        key = (theta, task)
        if key not in self._cache:
            mdp = self.family.mdp(theta)
            reward = self.family.reward(theta, task)
            best = optimal_policy(mdp, reward, self.tol)
            self._cache[key] = (policy_value(best, mdp, reward), best)
        return self._cache[key]


def evaluate_model(
    model: EnsembleWorldModel,
    exploration_policy: np.ndarray,
    family: EnvironmentFamily,
    config: EvalConfig,
    checkpoint: int = 0,
    rng: np.random.Generator | None = None,
    optimal: OptimalValueCache | None = None,
) -> EvalReport:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    optimal = optimal or OptimalValueCache(family, config.vi_tol)
    tasks = list(config.tasks or family.task_rewards)
    if config.enumerate:
        drawn = list(family.param_grid)
    else:
        idx = rng.choice(len(family.param_grid), size=config.n_eval, p=family.dr_distribution)
        drawn = [family.param_grid[i] for i in idx]
    report = EvalReport(checkpoint, tasks, drawn, alpha=config.alpha, ood_params=list(family.ood_params))
    c = bound_constant(family.discount)
    for task in tasks:
        policy = derive_task_policy(model, family, task, config.vi_tol)
        results = {}
        for theta in family.all_params:
            sl = family.space.slice(theta)
            true_mdp = family.mdp(theta)
            learned = model.model_mdp(family, theta)
            reward = family.reward(theta, task)
            best_value, best = optimal.get(theta, task)
            value = policy_value(policy[sl], true_mdp, reward)
            bound = c * (expected_model_tv(best, true_mdp, learned)
                         + expected_model_tv(policy[sl], true_mdp, learned))
            results[theta] = ThetaResult(value, best_value - value, bound)
        report.per_theta[task] = results
    for theta in family.param_grid:
        report.wm_error[theta] = world_model_error(model, family, theta, exploration_policy)
    return report


def evaluate_checkpoint(checkpoint, family: EnvironmentFamily, config: EvalConfig,
                        rng: np.random.Generator | None = None,
                        optimal: OptimalValueCache | None = None) -> EvalReport:
    """Evaluate a trainer Checkpoint; deterministic given ``rng`` (or ``config.seed``)."""
    model = checkpoint.restore_model(family)
    return evaluate_model(model, checkpoint.exploration_policy, family, config,
                          checkpoint.episode, rng, optimal)


# -- bound fuzzing ------------------------------------------------------------


@dataclass
class FuzzSummary:
    n_instances: int
    lemma_violations: int
    prop1_violations: int
    worst_lemma_slack: float
    worst_prop1_slack: float
    median_lemma_slack: float
    median_prop1_slack: float

    @property
    def passed(self) -> bool:
        return self.lemma_violations == 0 and self.prop1_violations == 0


class BoundViolation(AssertionError):
    pass


def perturbed_model(rng: np.random.Generator, true: TabularMdp, identical: bool = False) -> TabularMdp:
    """Copy of ``true`` whose rows are each mixed with a random row by a random weight;
    roughly a third of the rows are left exact."""
    if identical:
        return true.with_transition(true.transition.copy())
    S, A = true.num_states, true.num_actions
    noise = random_mdp(rng, S, A, true.discount, sparsity=rng.uniform(0, 0.7)).transition
    weight = rng.uniform(0, 1, size=(S, A, 1)) * (rng.random((S, A, 1)) > 0.33)
    return true.with_transition((1 - weight) * true.transition + weight * noise)


def random_instance(rng, max_states=6, max_actions=3, discount=0.9, identical=False):
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    true = random_mdp(rng, S, A, discount, sparsity=rng.uniform(0, 0.8))
    model = perturbed_model(rng, true, identical)
    reward = rng.random((S, A))
    policy = rng.dirichlet(np.ones(A) * rng.uniform(0.1, 2.0), size=S)
    return true, model, reward, policy


def bound_fuzz(
    n_instances: int,
    max_states: int = 6,
    max_actions: int = 3,
    rng: np.random.Generator | None = None,
    discount: float = 0.9,
    identical: bool = False,
    slack_tol: float = 1e-9,
    raise_on_violation: bool = False,
) -> FuzzSummary:
    """Check the simulation lemma and the two-term regret bound on random instances."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    lemma, prop = [], []
    for _ in range(n_instances):
        true, model, reward, policy = random_instance(rng, max_states, max_actions, discount, identical)
        lhs, rhs = simulation_lemma_gap(policy, true, model, reward)
        lemma.append(rhs - lhs)
        lhs, rhs = proposition1_gap(model, true, reward)
        prop.append(rhs - lhs)
    lemma, prop = np.array(lemma), np.array(prop)
    summary = FuzzSummary(
        n_instances,
        int((lemma < -slack_tol).sum()),
        int((prop < -slack_tol).sum()),
        float(lemma.min()),
        float(prop.min()),
        float(np.median(lemma)),
        float(np.median(prop)),
    )
    if raise_on_violation and not summary.passed:
        raise BoundViolation(f"bound violated: {summary}")
    return summary
