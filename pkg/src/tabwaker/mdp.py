"""Exact solvers and metrics for finite discounted MDPs.

Rewards, policies and occupancy measures are plain numpy arrays indexed
``(state, action)``; a policy row is a distribution over actions.  Everything
here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_TOL = 1e-12
TIE_TOL = 1e-12


class NonConvergenceError(RuntimeError):
    """Value iteration hit its sweep cap without reaching the tolerance."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Reward-free finite MDP: transition[s, a, s'], start distribution, discount."""

    transition: np.ndarray
    initial_state_dist: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        mu = np.asarray(self.initial_state_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if (P < 0).any():
            raise ValueError("transition has negative entries")
        if np.abs(P.sum(axis=2) - 1.0).max() > ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if mu.shape != (P.shape[0],) or (mu < 0).any() or abs(mu.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_state_dist must be a distribution over states")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        P.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "initial_state_dist", mu)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_transition(self, transition: np.ndarray) -> "TabularMdp":
        return TabularMdp(transition, self.initial_state_dist, self.discount)


def check_reward(reward: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"reward shape {reward.shape} does not match MDP")
    if (reward < 0).any() or (reward > 1).any():
        raise ValueError("reward entries must lie in [0, 1]")
    return reward


def check_policy(policy: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"policy shape {policy.shape} does not match MDP")
    if (policy < 0).any() or np.abs(policy.sum(axis=1) - 1.0).max() > ROW_TOL:
        raise ValueError("policy rows must be distributions")
    return policy


def deterministic_policy(actions, num_actions: int) -> np.ndarray:
    """One-hot policy table from a vector of action indices."""
    actions = np.asarray(actions, dtype=int)
    policy = np.zeros((actions.size, num_actions))
    policy[np.arange(actions.size), actions] = 1.0
    return policy


def greedy(q: np.ndarray) -> np.ndarray:
    """Greedy one-hot policy from Q values; ties go to the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    near = q >= best - TIE_TOL * np.maximum(1.0, np.abs(best))
    return deterministic_policy(near.argmax(axis=1), q.shape[1])


def q_values(mdp: TabularMdp, reward: np.ndarray, values: np.ndarray) -> np.ndarray:
    return reward + mdp.discount * (mdp.transition @ values)


def value_iteration(
    mdp: TabularMdp,
    reward: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    residuals: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the Bellman optimality equation by repeated sweeps.

    Returns the value table and a greedy deterministic policy.  If
    ``residuals`` is given, the sup-norm Bellman residual of every sweep is
    appended to it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    reward = check_reward(reward, mdp)
    values = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        new = q_values(mdp, reward, values).max(axis=1)
        residual = np.abs(new - values).max()
        values = new
        if residuals is not None:
            residuals.append(float(residual))
        if residual <= tol:
            break
    else:
        raise NonConvergenceError(f"no convergence to {tol} within {max_iter} sweeps")
    return values, greedy(q_values(mdp, reward, values))


def policy_transition(policy: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    """State-to-state kernel P_pi[s, s'] under the policy."""
    return np.einsum("sa,sap->sp", policy, mdp.transition)


def state_values(policy: np.ndarray, mdp: TabularMdp, reward: np.ndarray) -> np.ndarray:
    """Exact per-state values of a policy via a direct linear solve."""
    policy = check_policy(policy, mdp)
    reward = check_reward(reward, mdp)
    system = np.eye(mdp.num_states) - mdp.discount * policy_transition(policy, mdp)
    r_pi = (policy * reward).sum(axis=1)
    try:
        return np.linalg.solve(system, r_pi)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("policy evaluation solve failed") from exc


def policy_value(policy: np.ndarray, mdp: TabularMdp, reward: np.ndarray) -> float:
    """Expected discounted return from the initial state distribution."""
    return float(mdp.initial_state_dist @ state_values(policy, mdp, reward))


def occupancy(policy: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    """Normalized discounted state-action occupancy (1-g) sum_t g^t Pr(s_t, a_t)."""
    policy = check_policy(policy, mdp)
    system = np.eye(mdp.num_states) - mdp.discount * policy_transition(policy, mdp).T
    try:
        d_state = (1.0 - mdp.discount) * np.linalg.solve(system, mdp.initial_state_dist)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("occupancy solve failed") from exc
    d_state = np.maximum(d_state, 0.0)
    return d_state[:, None] * policy


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def tv_rows(model: np.ndarray, true: np.ndarray) -> np.ndarray:
    """TV distance between matching next-state rows of two (S, A, S) tensors."""
    if model.shape != true.shape:
        raise ValueError(f"shape mismatch: {model.shape} vs {true.shape}")
    return 0.5 * np.abs(model - true).sum(axis=-1)


def optimal_policy(mdp: TabularMdp, reward: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return value_iteration(mdp, reward, tol=tol)[1]


def regret(policy: np.ndarray, mdp: TabularMdp, reward: np.ndarray, tol: float = 1e-12) -> float:
    """V(pi*) - V(pi), both evaluated exactly; pi* from value iteration."""
    best = optimal_policy(mdp, reward, tol)
    return policy_value(best, mdp, reward) - policy_value(policy, mdp, reward)


def _check_pair(true_mdp: TabularMdp, model_mdp: TabularMdp) -> None:
    if true_mdp.transition.shape != model_mdp.transition.shape:
        raise ValueError("true and model MDPs differ in state/action counts")
    if true_mdp.discount != model_mdp.discount:
        raise ValueError("true and model MDPs differ in discount")
    if not np.array_equal(true_mdp.initial_state_dist, model_mdp.initial_state_dist):
        raise ValueError("true and model MDPs differ in initial distribution")


def bound_constant(discount: float) -> float:
    return 2.0 * discount / (1.0 - discount) ** 2


def expected_model_tv(policy: np.ndarray, true_mdp: TabularMdp, model_mdp: TabularMdp) -> float:
    """E over d(pi, model) of TV(model(.|s,a), true(.|s,a))."""
    d = occupancy(policy, model_mdp)
    return float((d * tv_rows(model_mdp.transition, true_mdp.transition)).sum())


def simulation_lemma_gap(
    policy: np.ndarray, true_mdp: TabularMdp, model_mdp: TabularMdp, reward: np.ndarray
) -> tuple[float, float]:
    """Both sides of the simulation lemma for one policy; lhs <= rhs must hold."""
    _check_pair(true_mdp, model_mdp)
    lhs = abs(policy_value(policy, model_mdp, reward) - policy_value(policy, true_mdp, reward))
    rhs = bound_constant(true_mdp.discount) * expected_model_tv(policy, true_mdp, model_mdp)
    return lhs, rhs


def proposition1_gap(
    model_mdp: TabularMdp, true_mdp: TabularMdp, reward: np.ndarray, tol: float = 1e-12
) -> tuple[float, float]:
    """Regret of the model-optimal policy in the true MDP, and its two-term bound."""
    _check_pair(true_mdp, model_mdp)
    model_best = optimal_policy(model_mdp, reward, tol)
    true_best = optimal_policy(true_mdp, reward, tol)
    lhs = policy_value(true_best, true_mdp, reward) - policy_value(model_best, true_mdp, reward)
    rhs = bound_constant(true_mdp.discount) * (
        expected_model_tv(true_best, true_mdp, model_mdp)
        + expected_model_tv(model_best, true_mdp, model_mdp)
    )
    return lhs, rhs


def enumerate_deterministic_policies(num_states: int, num_actions: int):
    """Yield every deterministic policy as a one-hot table (A**S of them)."""
    for flat in range(num_actions**num_states):
        actions = np.unravel_index(flat, (num_actions,) * num_states) if num_states else ()
        yield deterministic_policy(np.array(actions, dtype=int).ravel(), num_actions)


def random_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    discount: float,
    sparsity: float = 0.0,
) -> TabularMdp:
    """Random MDP with Dirichlet rows; ``sparsity`` zeroes that fraction of entries."""
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    if sparsity > 0:
        keep = rng.random(P.shape) >= sparsity
        keep[np.arange(num_states)[:, None], np.arange(num_actions), P.argmax(axis=2)] = True
        P = P * keep
        P /= P.sum(axis=2, keepdims=True)
    mu = rng.dirichlet(np.ones(num_states))
    return TabularMdp(P, mu, discount)
