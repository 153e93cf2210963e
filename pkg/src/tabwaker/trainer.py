"""The data-collection loop: sample an environment, roll out, update the
ensemble, estimate per-environment error from imagined rollouts, repeat."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tabwaker.curriculum import ErrorBuffer, SamplerConfig, sample_env
from tabwaker.envs import EnvironmentFamily, EnvParams
from tabwaker.exploration import (
    ExplorationConfig,
    make_random_policy,
    mix_epsilon,
    refresh_exploration_policy,
)
from tabwaker.world_model import EnsembleWorldModel, ModelConfig


@dataclass(frozen=True)
class TrainerConfig:
    total_episodes: int = 2000
    episode_length: int = 50
    imagine_rollouts: int = 8
    horizon: int = 15
    checkpoint_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("total_episodes", "episode_length", "horizon", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"trainer.{name} must be >= 1")
        if self.imagine_rollouts < 0:
            raise ValueError("trainer.imagine_rollouts must be >= 0")


@dataclass
class Trajectory:
    theta: EnvParams
    steps: np.ndarray  # (length, 3) global (s, a, s') rows

    @property
    def episode_length(self) -> int:
        return len(self.steps)

    def visited_states(self) -> np.ndarray:
        return np.append(self.steps[:, 0], self.steps[-1, 2])


@dataclass
class DataBuffer:
    trajectories: list = field(default_factory=list)

    def add(self, trajectory: Trajectory) -> None:
        self.trajectories.append(trajectory)

    def sample(self, rng: np.random.Generator) -> Trajectory:
        if not self.trajectories:
            raise ValueError("data buffer is empty")
        return self.trajectories[int(rng.integers(len(self.trajectories)))]

    def __len__(self):
        return len(self.trajectories)


def _draw_rows(cumulative: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cumulative, u, side="right")), len(cumulative) - 1)


def collect_episode(
    family: EnvironmentFamily,
    theta: EnvParams,
    policy: np.ndarray,
    length: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll ``policy`` (indexed by global state) for ``length`` steps in the true environment."""
    mdp = family.mdp(theta)
    offset = family.space.slice(theta).start
    cum_T = np.cumsum(mdp.transition, axis=2)
    cum_pi = np.cumsum(policy[offset:offset + mdp.num_states], axis=1)
    u = rng.random(2 * length + 1)
    s = _draw_rows(np.cumsum(mdp.initial_state_dist), u[0])
    steps = np.empty((length, 3), dtype=np.int64)
    for t in range(length):
        a = _draw_rows(cum_pi[s], u[2 * t + 1])
        s_next = _draw_rows(cum_T[s, a], u[2 * t + 2])
        steps[t] = (s + offset, a, s_next + offset)
        s = s_next
    return Trajectory(theta, steps)


def imagined_error(
    model: EnsembleWorldModel,
    theta: EnvParams,
    start: int,
    policy: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Average disagreement along one imagined rollout inside the mean model.

    Returns the estimate and the visited (global_s, a) pairs.
    """
    sl = model.space.slice(theta)
    cum_T = np.cumsum(model.slice_dynamics(theta), axis=2)
    cum_pi = np.cumsum(policy[sl], axis=1)
    dis = model.slice_disagreement(theta)
    u = rng.random(2 * horizon)
    z = start - sl.start
    pairs = np.empty((horizon, 2), dtype=np.int64)
    for t in range(horizon):
        a = _draw_rows(cum_pi[z], u[2 * t])
        pairs[t] = (z, a)
        z = _draw_rows(cum_T[z, a], u[2 * t + 1])
    estimate = float(dis[pairs[:, 0], pairs[:, 1]].mean())
    pairs[:, 0] += sl.start
    return estimate, pairs


def imagine(
    data: DataBuffer,
    buffer: ErrorBuffer,
    model: EnsembleWorldModel,
    expl_policy: np.ndarray,
    config: TrainerConfig,
    rng: np.random.Generator,
    refresh=None,
) -> tuple[np.ndarray, ErrorBuffer, list]:
    """Estimate errors from ``config.imagine_rollouts`` imagined rollouts.

    Stored trajectories are drawn uniformly, except that a setting absent
    from the error buffer (just collected for the first time) is scored by
    the first rollout.  ``refresh``, when given, is called afterwards to
    produce the next exploration policy.  Returns the policy, the buffer and
    the list of (theta, estimate) pairs recorded.
    """
    if not len(data):
        raise ValueError("imagine needs a nonempty data buffer")
    recorded = []
    for k in range(config.imagine_rollouts):
        newest = data.trajectories[-1]
        if k == 0 and newest.theta not in buffer.ema:
            trajectory = newest
        else:
            trajectory = data.sample(rng)
        starts = trajectory.visited_states()
        start = int(starts[rng.integers(len(starts))])
        estimate, _ = imagined_error(model, trajectory.theta, start, expl_policy, config.horizon, rng)
        buffer.record_error(trajectory.theta, estimate)
        recorded.append((trajectory.theta, estimate))
    policy = refresh() if refresh is not None else expl_policy
    return policy, buffer, recorded


@dataclass
class Checkpoint:
    episode: int
    model_state: dict
    buffer_rows: list
    exploration_policy: np.ndarray  # behaviour policy actually used for data collection

    def save(self, path) -> None:
        labels = np.array([r[0] for r in self.buffer_rows], dtype=str)
        values = np.array([r[1:] for r in self.buffer_rows], dtype=float).reshape(-1, 3)
        np.savez_compressed(
            path,
            episode=np.int64(self.episode),
            exploration_policy=self.exploration_policy,
            buffer_labels=labels,
            buffer_values=values,
            **{f"model_{k}": v for k, v in self.model_state.items()},
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path) as data:
            model_state = {k[len("model_"):]: data[k] for k in data.files if k.startswith("model_")}
            rows = [(str(lab), *map(float, vals))
                    for lab, vals in zip(data["buffer_labels"], data["buffer_values"])]
            return cls(int(data["episode"]), model_state, rows, data["exploration_policy"])

    def restore_model(self, family: EnvironmentFamily) -> EnsembleWorldModel:
        n_members = int(self.model_state["header"][1])
        model = EnsembleWorldModel(family.space, family.num_actions, ensemble_size=n_members)
        model.load_state_dict(self.model_state)
        return model


@dataclass
class RunResult:
    steps_csv: str
    model: EnsembleWorldModel
    buffer: ErrorBuffer
    exploration_policy: np.ndarray
    checkpoints: list
    sampled: list  # theta drawn per episode


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def run(
    family: EnvironmentFamily,
    sampler_config: SamplerConfig,
    trainer_config: TrainerConfig,
    exploration_config: ExplorationConfig,
    model_config: ModelConfig | None = None,
    out_dir=None,
) -> RunResult:
    """Execute the full training loop; bit-reproducible given the configs."""
    model_config = model_config or ModelConfig()
    seeds = np.random.SeedSequence(trainer_config.seed).spawn(4)
    sampler_rng, rollout_rng, imagine_rng = (np.random.default_rng(s) for s in seeds[:3])
    model = EnsembleWorldModel(
        family.space,
        family.num_actions,
        ensemble_size=model_config.ensemble_size,
        prior_pseudocount=model_config.prior_pseudocount,
        bootstrap_rate=model_config.bootstrap_rate,
        rng_seed=seeds[3],
    )
    buffer = ErrorBuffer(sampler_config.ema_alpha, sampler_config.delta_alpha)
    data = DataBuffer()
    greedy_policy = make_random_policy(family.space, family.num_actions)
    behaviour = mix_epsilon(greedy_policy, exploration_config.epsilon)

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    grid_labels = [t.label for t in family.param_grid]
    log = io.StringIO()
    writer = csv.writer(log, lineterminator="\n")
    writer.writerow(["episode", "env_step", "theta", "delta_theta", *(f"ema_{l}" for l in grid_labels)])

    checkpoints, sampled = [], []
    env_steps, next_rate = 0, sampler_config.rate_interval
    L = trainer_config.episode_length

    for episode in range(1, trainer_config.total_episodes + 1):
        theta = sample_env(sampler_config, buffer, family, sampler_rng)
        sampled.append(theta)
        trajectory = collect_episode(family, theta, behaviour, L, rollout_rng)
        data.add(trajectory)
        model.observe(trajectory.steps)

        refresh = None
        if episode % exploration_config.refresh_interval == 0:
            def refresh():
                return refresh_exploration_policy(model, exploration_config, family.discount)
        new_greedy, buffer, recorded = imagine(
            data, buffer, model, behaviour, trainer_config, imagine_rng, refresh
        )
        if refresh is not None:
            greedy_policy = new_greedy
            behaviour = mix_epsilon(greedy_policy, exploration_config.epsilon)

        env_steps += L
        while env_steps >= next_rate:
            buffer.checkpoint_rates()
            next_rate += sampler_config.rate_interval

        mean_delta = np.mean([d for _, d in recorded]) if recorded else None
        writer.writerow([
            episode, env_steps, theta.label, _fmt(mean_delta),
            *(_fmt(buffer.ema.get(t)) for t in family.param_grid),
        ])

        if episode % trainer_config.checkpoint_interval == 0 or episode == trainer_config.total_episodes:
            ckpt = Checkpoint(episode, model.state_dict(), buffer.to_rows(), behaviour.copy())
            checkpoints.append(ckpt)
            if out_dir is not None:
                ckpt.save(out_dir / "checkpoints" / f"ckpt_{episode:06d}.npz")

    steps_csv = log.getvalue()
    if out_dir is not None:
        (out_dir / "steps.csv").write_text(steps_csv, encoding="utf-8")
    return RunResult(steps_csv, model, buffer, behaviour, checkpoints, sampled)
