"""Reward-free exploration policies: uniform random and disagreement-maximizing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabwaker.envs import AugmentedStateSpace
from tabwaker.mdp import TabularMdp, value_iteration
from tabwaker.world_model import EnsembleWorldModel

KINDS = ("random", "disagreement-max")


@dataclass(frozen=True)
class ExplorationConfig:
    kind: str = "disagreement-max"
    refresh_interval: int = 5
    epsilon: float = 0.1
    vi_tol: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"exploration.kind must be one of {KINDS}, got {self.kind!r}")
        if self.refresh_interval < 1:
            raise ValueError("exploration.refresh_interval must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("exploration.epsilon must lie in [0, 1]")
        if self.vi_tol <= 0:
            raise ValueError("exploration.vi_tol must be positive")


def make_random_policy(space: AugmentedStateSpace, num_actions: int) -> np.ndarray:
    return np.full((space.total_states, num_actions), 1.0 / num_actions)


def mix_epsilon(policy: np.ndarray, epsilon: float) -> np.ndarray:
    """Behaviour policy: (1 - eps) * policy + eps * uniform."""
    return (1.0 - epsilon) * policy + epsilon / policy.shape[1]


def refresh_exploration_policy(
    model: EnsembleWorldModel, config: ExplorationConfig, discount: float
) -> np.ndarray:
    """Greedy policy maximizing discounted ensemble disagreement in the mean model.

    The intrinsic reward is the disagreement table divided by its global
    maximum; with no disagreement anywhere the uniform policy is returned.
    """
    if config.kind == "random":
        return make_random_policy(model.space, model.num_actions)
    dynamics = [model.slice_dynamics(theta) for theta in model.space.thetas]
    return disagreement_max_policy(
        model.space, dynamics, model.disagreement_table(), discount, config.vi_tol
    )


def disagreement_max_policy(
    space: AugmentedStateSpace,
    slice_dynamics: list,
    intrinsic: np.ndarray,
    discount: float,
    tol: float = 1e-8,
) -> np.ndarray:
    """Greedy policy for the intrinsic reward rescaled to [0, 1] by its maximum."""
    num_actions = intrinsic.shape[1]
    peak = intrinsic.max()
    if peak <= 0:
        return make_random_policy(space, num_actions)
    intrinsic = intrinsic / peak
    policy = np.empty((space.total_states, num_actions))
    # slices are disjoint, so solving block by block equals one global solve
    for theta, dynamics in zip(space.thetas, slice_dynamics):
        sl = space.slice(theta)
        n = sl.stop - sl.start
        block = TabularMdp(dynamics, np.full(n, 1.0 / n), discount)
        policy[sl] = value_iteration(block, intrinsic[sl], tol=tol)[1]
    return policy
