"""Experiment configuration: one YAML file fully determines an experiment."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from tabwaker.curriculum import STRATEGIES, SamplerConfig
from tabwaker.envs import FAMILIES
from tabwaker.evaluation import EvalConfig
from tabwaker.exploration import ExplorationConfig
from tabwaker.trainer import TrainerConfig
from tabwaker.world_model import ModelConfig


class ConfigError(ValueError):
    """Invalid experiment configuration (message carries file/line/key)."""


def _keys(cls, *exclude):
    return {f.name for f in fields(cls)} - set(exclude)


SAMPLER_KEYS = _keys(SamplerConfig)
SECTION_KEYS = {
    "trainer": _keys(TrainerConfig, "seed"),
    "model": _keys(ModelConfig),
    "exploration": _keys(ExplorationConfig),
    "eval": _keys(EvalConfig),
    "sweep": {"strategy", "eta", "p_dr"},
}
TOP_LEVEL = {"family", "sampler", "seeds", "output", *SECTION_KEYS}


@dataclass
class ExperimentConfig:
    family: dict = field(default_factory=lambda: {"name": "slip-grid"})
    strategies: list = field(default_factory=lambda: ["waker-m"])
    sampler: dict = field(default_factory=dict)  # shared sampler keys besides strategy
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"
    sweep: dict | None = None


@dataclass
class RunSpec:
    """One (strategy, sampler overrides, seed) training run."""

    name: str
    seed: int
    sampler: SamplerConfig
    run_dir: Path

    def resolved(self, cfg: ExperimentConfig) -> dict:
        trainer = asdict(cfg.trainer)
        trainer["seed"] = self.seed
        ev = asdict(cfg.eval)
        ev["tasks"] = list(ev["tasks"]) if ev["tasks"] is not None else None
        return {
            "name": self.name,
            "family": cfg.family,
            "sampler": asdict(self.sampler),
            "trainer": trainer,
            "model": asdict(cfg.model),
            "exploration": asdict(cfg.exploration),
            "eval": ev,
        }


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def _line_index(node, prefix=()) -> dict:
    """Map dotted key paths to 1-based line numbers from a composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[".".join(path)] = key_node.start_mark.line + 1
            out.update(_line_index(value_node, path))
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        tree = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _line_index(tree)

    def fail(key: str, msg: str):
        where = f"{source}:{lines[key]}" if key in lines else source
        raise ConfigError(f"{where}: {key}: {msg}")

    for key in data:
        if key not in TOP_LEVEL:
            fail(key, "unknown key")

    def section(name: str, allowed: set) -> dict:
        sec = data.get(name) or {}
        if not isinstance(sec, dict):
            fail(name, "must be a mapping")
        for key in sec:
            if key not in allowed:
                fail(f"{name}.{key}", "unknown key")
        return sec

    family = dict(section("family", {"name"} | {k for d, _ in FAMILIES.values() for k in d}))
    family.setdefault("name", "slip-grid")
    if family["name"] not in FAMILIES:
        fail("family.name", f"unknown family {family['name']!r}")

    sampler = dict(section("sampler", SAMPLER_KEYS))
    strategies = sampler.pop("strategy", "waker-m")
    strategies = [strategies] if isinstance(strategies, str) else list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            fail("sampler.strategy", f"unknown strategy {s!r}")

    built = {}
    for name, cls in (("trainer", TrainerConfig), ("model", ModelConfig),
                      ("exploration", ExplorationConfig), ("eval", EvalConfig)):
        sec = section(name, SECTION_KEYS[name])
        try:
            built[name] = cls(**sec)
        except (TypeError, ValueError) as exc:
            fail(name, str(exc))
    try:
        SamplerConfig(strategy=strategies[0], **sampler)
    except (TypeError, ValueError) as exc:
        fail("sampler", str(exc))

    sweep = section("sweep", SECTION_KEYS["sweep"]) if "sweep" in data else None
    if sweep is not None:
        for key, values in sweep.items():
            if not isinstance(values, list) or not values:
                fail(f"sweep.{key}", "must be a nonempty list")

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        fail("seeds", "must be a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        fail("seeds", "duplicate seeds")

    return ExperimentConfig(
        family=family,
        strategies=strategies,
        sampler=sampler,
        seeds=seeds,
        output=str(data.get("output", "runs")),
        sweep=sweep,
        **built,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    return parse_config(text, str(path))


def _fmt_value(x) -> str:
    return f"{x:g}" if isinstance(x, float) else str(x)


def plan_runs(cfg: ExperimentConfig, sweep: bool = False) -> list:
    """Expand the config into run specs: strategies x seeds, or the sweep grid x seeds."""
    out = Path(cfg.output)
    specs = []
    if not sweep:
        for strategy in cfg.strategies:
            sampler = SamplerConfig(strategy=strategy, **cfg.sampler)
            for seed in cfg.seeds:
                specs.append(RunSpec(strategy, seed, sampler, out / strategy / f"seed{seed}"))
        return specs
    if not cfg.sweep:
        raise ConfigError("sweep requested but the config has no sweep section")
    grid = dict(cfg.sweep)
    grid.setdefault("strategy", cfg.strategies)
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        strategy = overrides.pop("strategy")
        try:
            sampler = SamplerConfig(strategy=strategy, **{**cfg.sampler, **overrides})
        except ValueError as exc:
            raise ConfigError(f"sweep: {exc}") from None
        name = "-".join([strategy] + [f"{k}{_fmt_value(v)}" for k, v in sorted(overrides.items())])
        for seed in cfg.seeds:
            specs.append(RunSpec(name, seed, sampler, out / name / f"seed{seed}"))
    return specs


def resolved_to_configs(resolved: dict):
    """Rebuild config objects from a run directory's resolved config.json."""
    ev = dict(resolved["eval"])
    return (
        resolved["family"],
        SamplerConfig(**resolved["sampler"]),
        TrainerConfig(**resolved["trainer"]),
        ExplorationConfig(**resolved["exploration"]),
        ModelConfig(**resolved["model"]),
        EvalConfig(**ev),
    )
