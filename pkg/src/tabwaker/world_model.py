"""Bootstrapped ensemble of count-based transition models over the augmented space.

Counts live in one dense block per parameter setting, so probability mass can
never leak across slices: observations are only accepted within a slice and
pseudocounts are only spread over in-slice destinations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabwaker.envs import AugmentedStateSpace, EnvironmentFamily, EnvParams
from tabwaker.mdp import TabularMdp, occupancy, tv_rows

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    ensemble_size: int = 10
    prior_pseudocount: float = 0.01
    bootstrap_rate: float = 0.5

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("model.ensemble_size must be >= 1")
        if self.prior_pseudocount <= 0:
            raise ValueError("model.prior_pseudocount must be positive")
        if not 0.0 < self.bootstrap_rate <= 1.0:
            raise ValueError("model.bootstrap_rate must lie in (0, 1]")


def ensemble_disagreement(member_rows: np.ndarray, num_destinations: int | None = None) -> np.ndarray:
    """Across-member population variance of next-state probabilities, averaged
    over destinations.

    ``member_rows`` has the ensemble on axis 0 and destinations on the last
    axis.  Rows of a slice only cover that slice's destinations; passing the
    global state count as ``num_destinations`` averages over the whole
    augmented space, where every out-of-slice entry has zero variance.
    """
    member_rows = np.asarray(member_rows, dtype=float)
    n = member_rows.shape[-1] if num_destinations is None else num_destinations
    # centre on member 0 first so that identical members give exactly zero
    return (member_rows - member_rows[:1]).var(axis=0).sum(axis=-1) / n


class EnsembleWorldModel:
    def __init__(
        self,
        space: AugmentedStateSpace,
        num_actions: int,
        ensemble_size: int = 10,
        prior_pseudocount: float = 0.01,
        bootstrap_rate: float = 0.5,
        rng_seed=0,
    ):
        if ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if prior_pseudocount <= 0:
            raise ValueError("prior_pseudocount must be positive")
        if not 0.0 < bootstrap_rate <= 1.0:
            raise ValueError("bootstrap_rate must lie in (0, 1]")
        self.space = space
        self.num_actions = int(num_actions)
        self.ensemble_size = int(ensemble_size)
        self.prior_pseudocount = float(prior_pseudocount)
        self.bootstrap_rate = float(bootstrap_rate)
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.counts = [
            np.zeros((self.ensemble_size, n, self.num_actions, n), dtype=np.int64)
            for n in space.sizes
        ]
        self._cache = {}

    # -- updates ---------------------------------------------------------

    def observe(self, transitions) -> None:
        """Add (global_s, a, global_s') triples; each member keeps each one w.p. bootstrap_rate."""
        data = np.asarray(transitions, dtype=np.int64).reshape(-1, 3)
        if len(data) == 0:
            return
        s, a, s_next = data.T
        total = self.space.total_states
        if (s < 0).any() or (s >= total).any() or (s_next < 0).any() or (s_next >= total).any():
            raise IndexError("state index out of range")
        if (a < 0).any() or (a >= self.num_actions).any():
            raise IndexError("action index out of range")
        owner = self.space.owner(s)
        if (owner != self.space.owner(s_next)).any():
            raise ValueError("transition crosses parameter-setting slices")
        keep = self.rng.random((len(data), self.ensemble_size)) < self.bootstrap_rate
        for i in np.unique(owner):
            rows = np.flatnonzero(owner == i)
            t_idx, member = np.nonzero(keep[rows])
            t_idx = rows[t_idx]
            off = self.space.offsets[i]
            np.add.at(self.counts[i], (member, s[t_idx] - off, a[t_idx], s_next[t_idx] - off), 1)
            self._cache.pop(int(i), None)

    # -- derived quantities ----------------------------------------------

    def _slice_stats(self, i: int):
        if i not in self._cache:
            counts = self.counts[i].astype(float) + self.prior_pseudocount
            members = counts / counts.sum(axis=-1, keepdims=True)
            mean = members.mean(axis=0)
            disagreement = ensemble_disagreement(members, self.space.total_states)
            self._cache[i] = (members, mean, disagreement)
        return self._cache[i]

    def member_dynamics(self, theta: EnvParams) -> np.ndarray:
        """(N, n, A, n) smoothed member transition tables for one slice."""
        return self._slice_stats(self.space.index_of(theta))[0]

    def slice_dynamics(self, theta: EnvParams) -> np.ndarray:
        """(n, A, n) mean-model transition table for one slice (local indices)."""
        return self._slice_stats(self.space.index_of(theta))[1]

    def slice_disagreement(self, theta: EnvParams) -> np.ndarray:
        return self._slice_stats(self.space.index_of(theta))[2]

    def mean_dynamics(self) -> np.ndarray:
        """Mean transition tensor over global states, block diagonal by slice."""
        total = self.space.total_states
        out = np.zeros((total, self.num_actions, total))
        for i, theta in enumerate(self.space.thetas):
            sl = self.space.slice(theta)
            out[sl, :, sl] = self._slice_stats(i)[1]
        return out

    def disagreement_table(self) -> np.ndarray:
        """(S_total, A) disagreement for every global state-action pair."""
        return np.concatenate([self._slice_stats(i)[2] for i in range(len(self.space))])

    def disagreement(self, global_s: int, a: int) -> float:
        """Mean over destinations of the across-member variance of T_i(s'|s,a)."""
        theta, local = self.space.to_local(int(global_s))
        if not 0 <= a < self.num_actions:
            raise IndexError("action index out of range")
        return float(self.slice_disagreement(theta)[local, a])

    def model_mdp(self, family: EnvironmentFamily, theta: EnvParams) -> TabularMdp:
        """The learned MDP for one slice, with the true start distribution."""
        true = family.mdp(theta)
        return true.with_transition(self.slice_dynamics(theta))

    def row_counts(self, theta: EnvParams) -> np.ndarray:
        """(N, n, A) number of observations absorbed per member and row."""
        return self.counts[self.space.index_of(theta)].sum(axis=-1)

    # -- persistence -----------------------------------------------------

    def state_dict(self) -> dict:
        triples = []
        for i, block in enumerate(self.counts):
            m, s, a, s2 = np.nonzero(block)
            off = self.space.offsets[i]
            triples.append(np.stack([m, s + off, a, s2 + off, block[m, s, a, s2]], axis=1))
        return {
            "header": np.array(
                [FORMAT_VERSION, self.ensemble_size, self.num_actions, self.space.total_states],
                dtype=np.int64,
            ),
            "slice_sizes": self.space.sizes.astype(np.int64),
            "prior_pseudocount": np.float64(self.prior_pseudocount),
            "bootstrap_rate": np.float64(self.bootstrap_rate),
            "count_triples": np.concatenate(triples).astype(np.int64)
            if triples
            else np.zeros((0, 5), np.int64),
        }

    def load_state_dict(self, state: dict) -> None:
        version, n_members, n_actions, total = (int(x) for x in state["header"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        if (n_members, n_actions, total) != (
            self.ensemble_size,
            self.num_actions,
            self.space.total_states,
        ) or not np.array_equal(state["slice_sizes"], self.space.sizes):
            raise ValueError("snapshot does not match this model's dimensions")
        self.prior_pseudocount = float(state["prior_pseudocount"])
        self.bootstrap_rate = float(state["bootstrap_rate"])
        for block in self.counts:
            block[...] = 0
        m, s, a, s2, c = np.asarray(state["count_triples"], dtype=np.int64).reshape(-1, 5).T
        owner = self.space.owner(s)
        for i in np.unique(owner):
            k = owner == i
            off = self.space.offsets[i]
            self.counts[i][m[k], s[k] - off, a[k], s2[k] - off] = c[k]
        self._cache.clear()

    def save(self, path) -> None:
        np.savez_compressed(path, **self.state_dict())

    @classmethod
    def load(cls, path, space: AugmentedStateSpace, num_actions: int) -> "EnsembleWorldModel":
        with np.load(path) as data:
            state = {k: data[k] for k in data.files}
        _, n_members, _, _ = (int(x) for x in state["header"])
        model = cls(space, num_actions, ensemble_size=n_members,
                    prior_pseudocount=float(state["prior_pseudocount"]),
                    bootstrap_rate=float(state["bootstrap_rate"]))
        model.load_state_dict(state)
        return model


def mean_dynamics(model: EnsembleWorldModel) -> np.ndarray:
    return model.mean_dynamics()


def disagreement(model: EnsembleWorldModel, global_s: int, a: int) -> float:
    return model.disagreement(global_s, a)


def world_model_error(
    model: EnsembleWorldModel,
    family: EnvironmentFamily,
    theta: EnvParams,
    expl_policy: np.ndarray,
) -> float:
    """Expected TV between learned and true rows under the exploration
    policy's occupancy in the learned slice MDP."""
    sl = family.space.slice(theta)
    learned = model.model_mdp(family, theta)
    d = occupancy(expl_policy[sl], learned)
    tv = tv_rows(learned.transition, family.mdp(theta).transition)
    return float(min(max((d * tv).sum(), 0.0), 1.0))


def smoothing_bias_bound(
    model: EnsembleWorldModel,
    family: EnvironmentFamily,
    theta: EnvParams,
    expl_policy: np.ndarray,
) -> float:
    """Occupancy-weighted worst-member pseudocount bias k*n/(c + k*n).

    Bounds world_model_error when every observation matches a deterministic
    true row exactly.
    """
    sl = family.space.slice(theta)
    n = sl.stop - sl.start
    k = model.prior_pseudocount
    c_min = model.row_counts(theta).min(axis=0)
    d = occupancy(expl_policy[sl], model.model_mdp(family, theta))
    return float((d * (k * n / (c_min + k * n))).sum())
