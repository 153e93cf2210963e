"""Parameterized gridworld families and the augmented (theta, state) index space."""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tabwaker.mdp import TabularMdp

# up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
PERPENDICULAR = ((1, 3), (0, 2), (1, 3), (0, 2))
OBSTACLE_FRACTION = 0.12
TASKS = ("reach-goal", "reach-corner", "avoid-region")


@dataclass(frozen=True, order=True)
class EnvParams:
    size: int
    slip: float

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"size must be an integer >= 2, got {self.size}")
        if not 0.0 <= self.slip < 1.0:
            raise ValueError(f"slip must lie in [0, 1), got {self.slip}")

    @property
    def label(self) -> str:
        return f"size{self.size}_slip{self.slip:g}"

    @classmethod
    def from_label(cls, label: str) -> "EnvParams":
        size, slip = label.split("_")
        return cls(int(size.removeprefix("size")), float(slip.removeprefix("slip")))


class AugmentedStateSpace:
    """Disjoint global index ranges, one per environment parameter setting."""

    def __init__(self, thetas, sizes):
        self.thetas = list(thetas)
        sizes = [int(n) for n in sizes]
        if len(set(self.thetas)) != len(self.thetas):
            raise ValueError("duplicate parameter settings")
        self.sizes = np.array(sizes, dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)
        self.total_states = int(self.sizes.sum())
        self._index = {theta: i for i, theta in enumerate(self.thetas)}
        # global state -> owning slice index
        self._owner = np.repeat(np.arange(len(self.thetas)), self.sizes)

    def __len__(self):
        return len(self.thetas)

    def __contains__(self, theta):
        return theta in self._index

    def index_of(self, theta: EnvParams) -> int:
        try:
            return self._index[theta]
        except KeyError:
            raise KeyError(f"unknown parameter setting {theta}") from None

    def slice(self, theta: EnvParams) -> slice:
        i = self.index_of(theta)
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.sizes[i]))

    def to_global(self, theta: EnvParams, local):
        i = self.index_of(theta)
        local = np.asarray(local)
        if (local < 0).any() or (local >= self.sizes[i]).any():
            raise IndexError("local state index out of range")
        return local + self.offsets[i]

    def to_local(self, global_state: int) -> tuple[EnvParams, int]:
        if not 0 <= global_state < self.total_states:
            raise IndexError(f"global state {global_state} out of range")
        i = int(self._owner[global_state])
        return self.thetas[i], int(global_state - self.offsets[i])

    def owner(self, global_states) -> np.ndarray:
        return self._owner[np.asarray(global_states)]


@dataclass(frozen=True)
class GridLayout:
    size: int
    free: np.ndarray  # (size, size) bool
    start: tuple
    goal: tuple
    corner: tuple

    def cells(self):
        return [tuple(c) for c in np.argwhere(self.free)]


def _connected(free: np.ndarray) -> bool:
    cells = np.argwhere(free)
    seen = {tuple(cells[0])}
    queue = deque(seen)
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < free.shape[0] and 0 <= nxt[1] < free.shape[1]:
                if free[nxt] and nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
    return len(seen) == len(cells)


def grid_layout(size: int) -> GridLayout:
    """Obstacle layout for a given grid side; identical for every slip value."""
    start, goal, corner = (0, 0), (size - 1, size - 1), (0, size - 1)
    reserved = {start, goal, corner, (size - 1, 0)}
    n_obstacles = int(OBSTACLE_FRACTION * size * size) if size >= 4 else 0
    rng = np.random.default_rng(1_000 + size)
    candidates = [(r, c) for r in range(size) for c in range(size) if (r, c) not in reserved]
    while True:
        free = np.ones((size, size), dtype=bool)
        for k in rng.permutation(len(candidates))[:n_obstacles]:
            free[candidates[k]] = False
        if _connected(free):
            return GridLayout(size, free, start, goal, corner)


def gridworld_mdp(theta: EnvParams, discount: float) -> TabularMdp:
    """Goal-reaching gridworld; with probability ``slip`` the agent veers sideways."""
    layout = grid_layout(theta.size)
    cells = layout.cells()
    index = {cell: i for i, cell in enumerate(cells)}
    n = len(cells)
    P = np.zeros((n, len(MOVES), n))

    def land(cell, move):
        r, c = cell[0] + MOVES[move][0], cell[1] + MOVES[move][1]
        if 0 <= r < theta.size and 0 <= c < theta.size and layout.free[r, c]:
            return index[(r, c)]
        return index[cell]

    for cell, s in index.items():
        for a in range(len(MOVES)):
            P[s, a, land(cell, a)] += 1.0 - theta.slip
            if theta.slip > 0:
                for side in PERPENDICULAR[a]:
                    P[s, a, land(cell, side)] += theta.slip / 2
    mu = np.zeros(n)
    mu[index[layout.start]] = 1.0
    return TabularMdp(P, mu, discount)


def gridworld_reward(theta: EnvParams, task: str) -> np.ndarray:
    layout = grid_layout(theta.size)
    cells = layout.cells()
    r = np.zeros((len(cells), len(MOVES)))
    if task == "reach-goal":
        r[cells.index(layout.goal)] = 1.0
    elif task == "reach-corner":
        r[cells.index(layout.corner)] = 1.0
    elif task == "avoid-region":
        # unit reward outside the central band of rows, none inside it
        mid = (theta.size - 1) / 2
        for i, (row, _) in enumerate(cells):
            r[i] = 0.0 if abs(row - mid) <= 0.5 else 1.0
    else:
        raise KeyError(f"unknown task {task!r}")
    return r


@dataclass(eq=False)
class EnvironmentFamily:
    name: str
    param_grid: list
    generator: Callable[[EnvParams], TabularMdp]
    dr_distribution: np.ndarray
    hardest: EnvParams
    complex_subset: list
    ood_params: list
    task_rewards: dict
    definition: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dr_distribution = np.asarray(self.dr_distribution, dtype=float)
        if len(self.param_grid) != len(set(self.param_grid)):
            raise ValueError("param_grid has duplicates")
        if set(self.ood_params) & set(self.param_grid):
            raise ValueError("ood_params must be disjoint from param_grid")
        if self.dr_distribution.shape != (len(self.param_grid),):
            raise ValueError("dr_distribution must cover param_grid")
        if (self.dr_distribution <= 0).any() or abs(self.dr_distribution.sum() - 1) > 1e-12:
            raise ValueError("dr_distribution must be a full-support distribution")
        if self.hardest not in self.param_grid or not set(self.complex_subset) <= set(self.param_grid):
            raise ValueError("hardest and complex_subset must come from param_grid")
        self._mdps = {}
        thetas = list(self.param_grid) + list(self.ood_params)
        mdps = [self.mdp(theta) for theta in thetas]
        if len({m.num_actions for m in mdps}) != 1:
            raise ValueError("all environments must share the action count")
        for theta, m in zip(thetas, mdps):
            for task, fn in self.task_rewards.items():
                r = fn(theta)
                if r.shape != (m.num_states, m.num_actions) or (r < 0).any() or (r > 1).any():
                    raise ValueError(f"task {task} reward invalid for {theta}")
        self.space = AugmentedStateSpace(thetas, [m.num_states for m in mdps])
        self.num_actions = mdps[0].num_actions
        self.discount = mdps[0].discount

    def mdp(self, theta: EnvParams) -> TabularMdp:
        """Cached generator output."""
        if theta not in self._mdps:
            self._mdps[theta] = self.generator(theta)
        return self._mdps[theta]

    def reward(self, theta: EnvParams, task: str) -> np.ndarray:
        if task not in self.task_rewards:
            raise KeyError(f"unknown task {task!r}")
        return self.task_rewards[task](theta)

    def grid_index(self, theta: EnvParams) -> int:
        return self.param_grid.index(theta)

    @property
    def all_params(self) -> list:
        return list(self.param_grid) + list(self.ood_params)

    def definition_hash(self) -> str:
        blob = json.dumps(self.definition, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def augmented_mdp(family: EnvironmentFamily, theta: EnvParams) -> tuple[TabularMdp, slice]:
    if theta not in family.space:
        raise KeyError(f"unknown parameter setting {theta}")
    return family.mdp(theta), family.space.slice(theta)


SLIP_GRID_DEFAULTS = {
    "name": "slip-grid",
    "sizes": [3, 4, 5, 6, 7],
    "slips": [0.0, 0.1, 0.2],
    "ood_sizes": [8],
    "discount": 0.95,
}


def _build_slip_grid(cfg: dict) -> EnvironmentFamily:
    sizes = sorted(int(s) for s in cfg["sizes"])
    slips = sorted(float(p) for p in cfg["slips"])
    ood_sizes = sorted(int(s) for s in cfg["ood_sizes"])
    discount = float(cfg["discount"])
    if not sizes or not slips:
        raise ValueError("slip-grid needs at least one size and one slip")
    if len(set(sizes)) != len(sizes) or len(set(slips)) != len(slips):
        raise ValueError("sizes and slips must be unique")
    if set(ood_sizes) & set(sizes):
        raise ValueError("ood_sizes overlap training sizes")
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    grid = [EnvParams(s, p) for s in sizes for p in slips]
    ood = [EnvParams(s, p) for s in ood_sizes for p in slips]
    # two largest sizes, slips above the smallest (unless only one slip exists)
    big = sizes[-2:]
    rough = slips[1:] or slips
    complex_subset = [t for t in grid if t.size in big and t.slip in rough]
    return EnvironmentFamily(
        name="slip-grid",
        param_grid=grid,
        generator=lambda theta: gridworld_mdp(theta, discount),
        dr_distribution=np.full(len(grid), 1.0 / len(grid)),
        hardest=EnvParams(sizes[-1], slips[-1]),
        complex_subset=complex_subset,
        ood_params=ood,
        task_rewards={task: (lambda theta, task=task: gridworld_reward(theta, task)) for task in TASKS},
        definition={"name": "slip-grid", "sizes": sizes, "slips": slips,
                    "ood_sizes": ood_sizes, "discount": discount},
    )


FAMILIES = {"slip-grid": (SLIP_GRID_DEFAULTS, _build_slip_grid)}


def build_family(config: dict | None = None) -> EnvironmentFamily:
    """Build a registered family from a config mapping (``name`` plus overrides)."""
    config = dict(config or {})
    name = config.pop("name", "slip-grid")
    if name not in FAMILIES:
        raise KeyError(f"unknown family {name!r}")
    defaults, builder = FAMILIES[name]
    unknown = set(config) - set(defaults)
    if unknown:
        raise ValueError(f"unknown keys for family {name!r}: {sorted(unknown)}")
    return builder({**defaults, **config})
