"""Environment selection: the smoothed error buffer, normalizations, and samplers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tabwaker.envs import EnvironmentFamily, EnvParams

STRATEGIES = ("waker-m", "waker-r", "dr", "ge", "he-oracle", "rw-oracle")
# share of draws taken from the DR distribution by the GE and RW-Oracle baselines
BASELINE_DR_SHARE = 0.2
DEFAULT_ETA = {"waker-m": 1.0, "waker-r": 0.5}
ZERO_SPREAD = 1e-12
# full-scale smoothing settings; the desk-scale defaults below are shorter
FULL_SCALE_EMA_ALPHA = 0.9999
FULL_SCALE_DELTA_ALPHA = 0.95
FULL_SCALE_RATE_INTERVAL = 10_000
FULL_SCALE_P_DR = 0.2


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "waker-m"
    p_dr: float = 0.2
    eta: float | None = None
    ema_alpha: float = 0.99
    delta_alpha: float = 0.95
    rate_interval: int = 200

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"sampler.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.p_dr <= 1.0:
            raise ValueError("sampler.p_dr must lie in [0, 1]")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("sampler.eta must be positive")
        if not (0.0 <= self.ema_alpha < 1.0 and 0.0 <= self.delta_alpha < 1.0):
            raise ValueError("sampler.ema_alpha and sampler.delta_alpha must lie in [0, 1)")
        if self.rate_interval < 1:
            raise ValueError("sampler.rate_interval must be >= 1")

    @property
    def temperature(self) -> float:
        if self.eta is not None:
            return self.eta
        return DEFAULT_ETA.get(self.strategy, 1.0)


@dataclass
class ErrorBuffer:
    """Per-environment smoothed error magnitude and smoothed error-reduction rate."""

    ema_alpha: float = 0.99
    delta_alpha: float = 0.95
    ema: dict = field(default_factory=dict)
    prev_ema: dict = field(default_factory=dict)
    delta_ema: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.ema_alpha < 1.0 and 0.0 <= self.delta_alpha < 1.0):
            raise ValueError("smoothing factors must lie in [0, 1)")

    def record_error(self, theta: EnvParams, delta: float) -> None:
        if delta < 0:
            raise ValueError(f"error estimate must be nonnegative, got {delta}")
        if theta in self.ema:
            self.ema[theta] = self.ema_alpha * self.ema[theta] + (1 - self.ema_alpha) * delta
        else:
            self.ema[theta] = float(delta)

    def checkpoint_rates(self) -> None:
        """Fold the change in each smoothed error since the last checkpoint into its rate."""
        for theta, current in self.ema.items():
            if theta in self.prev_ema:
                reduction = self.prev_ema[theta] - current
                if theta in self.delta_ema:
                    self.delta_ema[theta] = (
                        self.delta_alpha * self.delta_ema[theta] + (1 - self.delta_alpha) * reduction
                    )
                else:
                    self.delta_ema[theta] = reduction
            self.prev_ema[theta] = current

    def __len__(self):
        return len(self.ema)

    def to_rows(self) -> list:
        return [
            (theta.label, self.ema[theta], self.prev_ema.get(theta, np.nan),
             self.delta_ema.get(theta, np.nan))
            for theta in self.ema
        ]

    @classmethod
    def from_rows(cls, rows, ema_alpha: float, delta_alpha: float) -> "ErrorBuffer":
        buf = cls(ema_alpha, delta_alpha)
        for label, ema, prev, delta in rows:
            theta = EnvParams.from_label(label)
            buf.ema[theta] = float(ema)
            if not np.isnan(prev):
                buf.prev_ema[theta] = float(prev)
            if not np.isnan(delta):
                buf.delta_ema[theta] = float(delta)
        return buf


def record_error(buffer: ErrorBuffer, theta: EnvParams, delta: float) -> None:
    buffer.record_error(theta, delta)


def checkpoint_rates(buffer: ErrorBuffer) -> None:
    buffer.checkpoint_rates()


def normalize_m(values: dict) -> dict:
    """Z-score the values (population std); all zeros when there is no spread."""
    if not values:
        raise ValueError("cannot normalize an empty map")
    x = np.array(list(values.values()), dtype=float)
    std = x.std()
    if std < ZERO_SPREAD:
        return dict.fromkeys(values, 0.0)
    return dict(zip(values, ((x - x.mean()) / std).tolist()))


def normalize_r(values: dict) -> dict:
    """Divide by the mean absolute value; all zeros when that is ~0."""
    if not values:
        raise ValueError("cannot normalize an empty map")
    x = np.array(list(values.values()), dtype=float)
    scale = np.abs(x).mean()
    if scale < ZERO_SPREAD:
        return dict.fromkeys(values, 0.0)
    return dict(zip(values, (x / scale).tolist()))


def boltzmann_probs(scores: dict, eta: float) -> dict:
    x = np.array(list(scores.values()), dtype=float) / eta
    w = np.exp(x - x.max())
    return dict(zip(scores, (w / w.sum()).tolist()))


def boltzmann_scores(strategy: str, buffer: ErrorBuffer) -> dict:
    """Normalized buffer contents driving the Boltzmann branch ({} if none yet)."""
    if strategy == "waker-m":
        return normalize_m(buffer.ema) if buffer.ema else {}
    if strategy == "waker-r":
        return normalize_r(buffer.delta_ema) if buffer.delta_ema else {}
    raise ValueError(f"{strategy} has no Boltzmann branch")


def expansion_box(family: EnvironmentFamily, seen) -> list:
    """Grid settings inside the axis-aligned box of parameter indices spanned by ``seen``."""
    sizes = sorted({t.size for t in family.param_grid})
    slips = sorted({t.slip for t in family.param_grid})
    seen = [t for t in seen if t in family.param_grid]
    if not seen:
        return []
    si = [sizes.index(t.size) for t in seen]
    pi = [slips.index(t.slip) for t in seen]
    return [
        t for t in family.param_grid
        if min(si) <= sizes.index(t.size) <= max(si) and min(pi) <= slips.index(t.slip) <= max(pi)
    ]


def _draw(rng: np.random.Generator, options: list, probs=None):
    return options[int(rng.choice(len(options), p=probs))]


def sample_dr(family: EnvironmentFamily, rng: np.random.Generator) -> EnvParams:
    return _draw(rng, family.param_grid, family.dr_distribution)


def sample_env(
    config: SamplerConfig,
    buffer: ErrorBuffer,
    family: EnvironmentFamily,
    rng: np.random.Generator,
) -> EnvParams:
    strategy = config.strategy
    if strategy == "dr":
        return sample_dr(family, rng)
    if strategy == "he-oracle":
        return family.hardest
    if strategy in ("waker-m", "waker-r"):
        use_dr = rng.random() < config.p_dr
        scores = boltzmann_scores(strategy, buffer)
        if use_dr or not scores:
            return sample_dr(family, rng)
        probs = boltzmann_probs(scores, config.temperature)
        return _draw(rng, list(probs), list(probs.values()))
    # ge and rw-oracle: fixed 20/80 split between DR and a restricted pool
    use_dr = rng.random() < BASELINE_DR_SHARE
    if strategy == "rw-oracle":
        return sample_dr(family, rng) if use_dr else _draw(rng, family.complex_subset)
    pool = expansion_box(family, buffer.ema)
    if use_dr or not pool:
        return sample_dr(family, rng)
    return _draw(rng, pool)


def sampling_distribution(
    config: SamplerConfig, buffer: ErrorBuffer, family: EnvironmentFamily
) -> np.ndarray:
    """Exact probability of each param_grid entry under ``sample_env``."""
    grid = family.param_grid
    dr = family.dr_distribution

    def over_grid(probs: dict) -> np.ndarray:
        out = np.zeros(len(grid))
        for theta, p in probs.items():
            out[family.grid_index(theta)] += p
        return out

    strategy = config.strategy
    if strategy == "dr":
        return dr.copy()
    if strategy == "he-oracle":
        return over_grid({family.hardest: 1.0})
    if strategy in ("waker-m", "waker-r"):
        scores = boltzmann_scores(strategy, buffer)
        if not scores:
            return dr.copy()
        return config.p_dr * dr + (1 - config.p_dr) * over_grid(boltzmann_probs(scores, config.temperature))
    if strategy == "rw-oracle":
        pool = family.complex_subset
        return BASELINE_DR_SHARE * dr + (1 - BASELINE_DR_SHARE) * over_grid(
            dict.fromkeys(pool, 1.0 / len(pool)))
    pool = expansion_box(family, buffer.ema)
    if not pool:
        return dr.copy()
    return BASELINE_DR_SHARE * dr + (1 - BASELINE_DR_SHARE) * over_grid(
        dict.fromkeys(pool, 1.0 / len(pool)))
