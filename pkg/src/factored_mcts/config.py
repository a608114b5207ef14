"""Run configuration: JSON schema, env-dependent defaults, strict validation.

A run config names the environment and overrides any search / training
defaults.  Unknown keys are rejected so typos fail loudly instead of
silently training with defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .envs import ENV_IDS
from .search import SearchConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad env id, bad value)."""


# Per-environment defaults from the experiment setup; anything not listed
# falls back to the dataclass defaults.
ENV_SEARCH_DEFAULTS = {
    "cmab": {"num_simulations": 15},
    "gridkey": {"num_simulations": 50},
}
ENV_TRAIN_DEFAULTS = {
    "cmab": {"sparsity_coef": 0.01},
    "gridkey": {"sparsity_coef": 0.0},
}

MODEL_KEYS = ("latent_width", "hidden_width", "hidden_layers")
TOP_LEVEL_KEYS = ("env", "seeds", "out_dir", "search", "train", "model",
                  "eval_interval", "eval_episodes", "mode")
MODES = ("abstraction", "vanilla", "no-abstraction")


@dataclass
class RunConfig:
    env: str = "cmab"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str | None = None
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    eval_interval: int = 2000
    eval_episodes: int = 32
    mode: str = "abstraction"

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "search": dataclasses.asdict(self.search),
            "train": dataclasses.asdict(self.train),
            "model": dict(self.model),
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
            "mode": self.mode,
        }


def _env_family(env_id: str) -> str:
    return "gridkey" if env_id.startswith("gridkey") else env_id


def _build_section(cls, env_defaults: dict, overrides: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {section} config key(s): {sorted(unknown)}")
    values = dict(env_defaults)
    values.update(overrides)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} config: {exc}") from exc


def build_run_config(raw: dict) -> RunConfig:
    """Validate a parsed JSON dict and apply environment defaults."""
    unknown = set(raw) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    env = raw.get("env", "cmab")
    if env not in ENV_IDS:
        raise ConfigError(f"unknown environment id {env!r}; known: {', '.join(ENV_IDS)}")
    family = _env_family(env)
    search = _build_section(SearchConfig, ENV_SEARCH_DEFAULTS.get(family, {}),
                            raw.get("search", {}), "search")
    train = _build_section(TrainConfig, ENV_TRAIN_DEFAULTS.get(family, {}),
                           raw.get("train", {}), "train")
    model = raw.get("model", {})
    unknown = set(model) - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
    mode = raw.get("mode", "abstraction")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; known: {', '.join(MODES)}")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    return RunConfig(
        env=env,
        seeds=list(seeds),
        out_dir=raw.get("out_dir"),
        search=search,
        train=train,
        model=dict(model),
        eval_interval=int(raw.get("eval_interval", 2000)),
        eval_episodes=int(raw.get("eval_episodes", 32)),
        mode=mode,
    )


def load_run_config(path: str) -> RunConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return build_run_config(raw)


def apply_mode(cfg: RunConfig) -> RunConfig:
    """Resolve the run mode into concrete search / training settings.

    vanilla: all-ones masks everywhere (the plain MuZero baseline).
    no-abstraction: masked model training, but the search ignores the masks.
    """
    if cfg.mode == "vanilla":
        cfg = dataclasses.replace(cfg)
        cfg.search = dataclasses.replace(cfg.search, vanilla_mode=True)
        cfg.train = dataclasses.replace(cfg.train, mask_mode="ones")
    elif cfg.mode == "no-abstraction":
        cfg = dataclasses.replace(cfg)
        cfg.search = dataclasses.replace(cfg.search, vanilla_mode=True)
    return cfg
