"""Layered run configuration: defaults < config file < command-line pairs.

The fully resolved config is serialized verbatim into the run directory;
re-running from that file reproduces the run bit-for-bit at 64-bit on a
single worker.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import yaml

from quadsim.learners import LearnerOptions
from quadsim.tasks import RewardWeights, TaskConfig
from quadsim.world import RandomizationSpec


class ConfigError(ValueError):
    """Carries every violated field, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    learn: LearnerOptions = field(default_factory=LearnerOptions)
    updates: int = 300
    seed: int = 1
    eval_episodes: int = 100
    eval_seed: int = 10_000
    checkpoint_every: int = 100
    record_envs: int = 4
    out_dir: str | None = None
    run_name: str | None = None
    bench_env_counts: tuple = (64, 256, 1024, 4096, 8192)
    bench_trials: int = 5
    bench_warmup: int = 3
    randomize: bool = False

    def resolved_task(self) -> TaskConfig:
        cfg = self.task
        if self.randomize and cfg.randomization is None:
            cfg = dataclasses.replace(cfg, randomization=RandomizationSpec())
        # replace() re-runs __post_init__ validation after raw overrides
        return dataclasses.replace(cfg)


# aliases accepted at the command line for the most common fields
ALIASES = {
    "task": "task.task",
    "dyn": "task.dynamics",
    "dynamics": "task.dynamics",
    "algo": "learn.algo",
    "n_envs": "task.n_envs",
    "n_agents": "task.n_agents",
    "horizon": "learn.horizon",
    "updates": "updates",
    "seed": "seed",
    "sensor": "task.sensor",
    "density": "task.density",
    "lr": "learn.actor_lr",
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def _set_dotted(tree: dict, path: str, value):
    parts = path.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override non-section '{p}' in '{path}'")
    node[parts[-1]] = value


def _apply_tree(cfg, tree: dict, prefix: str, problems: list):
    for key, value in tree.items():
        if not hasattr(cfg, key):
            problems.append(f"unknown field '{prefix}{key}'")
            continue
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply_tree(current, value, f"{prefix}{key}.", problems)
            continue
        if dataclasses.is_dataclass(current) and not isinstance(value, dict):
            problems.append(f"field '{prefix}{key}' expects a section")
            continue
        try:
            coerced = _coerce(current, value, f"{prefix}{key}")
        except ConfigError as e:
            problems.extend(e.problems)
            continue
        setattr(cfg, key, coerced)


def _coerce(current, value, name):
    if current is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"field '{name}' expects a bool, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"field '{name}' expects an int, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"field '{name}' expects a number, got {value!r}")
    if isinstance(current, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"field '{name}' expects a string, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"field '{name}' expects a list, got {value!r}")
    return value


def _validate(cfg: RunConfig, problems: list):
    from quadsim.learners import ALGOS
    from quadsim.tasks import TASK_NAMES
    from quadsim.dynamics import MODEL_NAMES

    if cfg.task.task not in TASK_NAMES:
        problems.append(f"task.task must be one of {TASK_NAMES}, got '{cfg.task.task}'")
    if cfg.task.dynamics not in MODEL_NAMES:
        problems.append(f"task.dynamics must be one of {MODEL_NAMES}, got '{cfg.task.dynamics}'")
    if cfg.learn.algo not in ALGOS:
        problems.append(f"learn.algo must be one of {ALGOS}, got '{cfg.learn.algo}'")
    if cfg.updates < 0:
        problems.append("updates must be >= 0")
    if cfg.task.n_envs < 1:
        problems.append("task.n_envs must be >= 1")
    if cfg.task.episode_len < 1:
        problems.append("task.episode_len must be >= 1")
    if cfg.task.sensor not in ("none", "depth", "lidar"):
        problems.append(f"task.sensor must be none|depth|lidar, got '{cfg.task.sensor}'")
    if cfg.eval_episodes < 1:
        problems.append("eval_episodes must be >= 1")


def resolve(file_path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build the layered RunConfig; raises ConfigError listing every issue."""
    cfg = RunConfig()
    problems: list[str] = []
    tree: dict = {}
    if file_path:
        try:
            with open(file_path) as f:
                loaded = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"config file '{file_path}': {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file '{file_path}' must hold a mapping")
        tree.update(loaded)
    for pair in overrides or []:
        if "=" not in pair:
            problems.append(f"override '{pair}' is not key=value")
            continue
        key, _, raw = pair.partition("=")
        key = ALIASES.get(key, key)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _set_dotted(tree, key, value)
    _apply_tree(cfg, tree, "", problems)
    _rebuild_typed(cfg, problems)
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _rebuild_typed(cfg: RunConfig, problems: list) -> None:
    """None-default nested sections arrive as plain dicts; rebuild them."""
    from quadsim.sensors import LidarPattern

    try:
        if isinstance(cfg.task.weights, dict):
            cfg.task.weights = RewardWeights(**cfg.task.weights)
        if isinstance(cfg.task.rl_weights, dict):
            cfg.task.rl_weights = RewardWeights(**cfg.task.rl_weights)
        if isinstance(cfg.task.randomization, dict):
            cfg.task.randomization = RandomizationSpec(**cfg.task.randomization)
        if isinstance(cfg.task.lidar, dict):
            cfg.task.lidar = LidarPattern(**cfg.task.lidar)
    except (TypeError, ValueError) as e:
        problems.append(f"invalid nested section: {e}")


def save_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)


def load_resolved(path: str) -> RunConfig:
    with open(path) as f:
        tree = json.load(f)
    cfg = RunConfig()
    problems: list[str] = []
    _apply_tree(cfg, tree, "", problems)
    _rebuild_typed(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg
