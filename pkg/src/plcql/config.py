"""Flat dotted-key run configuration: schema, YAML loading, flag overrides, validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .trainer import ConfigError, TrainConfig

COMMANDS = ("gen-data", "train", "eval", "ablate", "verify", "bench")


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | bool | str | list | list_or_none | int_or_none
    default: Any
    help: str = ""


def _train_keys() -> dict[str, Key]:
    kinds = {"lam": "list_or_none", "fixed_k": "int_or_none", "hidden": "list", "par_hidden": "list",
             "variant": "str", "normalize_advantage": "bool", "use_target_policies": "bool"}
    out = {}
    for name, default in TrainConfig().to_dict().items():
        kind = kinds.get(name) or ("int" if isinstance(default, int) and not isinstance(default, bool)
                                   else "float")
        out[f"train.{name}"] = Key(kind, default, f"training hyperparameter {name}")
    return out


SCHEMA: dict[str, Key] = {
    "seed": Key("int", 0, "master seed; also the default train.seed"),
    "out_dir": Key("str", None, "output directory"),
    "env.kind": Key("str", None, "grid_spread | matrix | tabular"),
    "env.n": Key("int", 3, "number of agents"),
    "env.grid_side": Key("int", 4, "grid side length (grid_spread)"),
    "env.horizon": Key("int", 10, "episode length"),
    "env.seed": Key("int", 0, "environment seed (landmarks / random tables)"),
    "env.collision_penalty": Key("float", 1.0, "per collided cell (grid_spread)"),
    "env.actions": Key("int", 3, "actions per agent (matrix, tabular)"),
    "env.payoff": Key("str", "all_equal", "matrix payoff: all_equal or all_top"),
    "env.states": Key("int", 4, "state count (tabular)"),
    "env.reward_scale": Key("float", 1.0, "reward bound (tabular)"),
    "data.path": Key("str", None, "dataset file"),
    "data.tier": Key("str", "medium_replay", "expert | medium | medium_replay | random"),
    "data.size": Key("int", 3000, "transitions to generate"),
    "data.seed": Key("int", 0, "collection seed"),
    "eval.checkpoint": Key("str", None, "checkpoint directory holding agent_policy_i.json"),
    "eval.episodes": Key("int", 100, "greedy evaluation episodes"),
    "eval.seed": Key("int", 12345, "evaluation seed"),
    "ablate.seeds": Key("list", [0, 1, 2, 3, 4], "training seeds per variant"),
    "verify.instances": Key("int", 50, "random instances for the bound sweep"),
    "verify.contraction_instances": Key("int", 20, "random instances for contraction checks"),
    "verify.pairs": Key("int", 10, "random table pairs per contraction instance"),
    "verify.seed": Key("int", 0, "instance seed"),
    "bench.agents": Key("list", [2, 4, 6], "agent counts"),
    "bench.iterations": Key("int", 100, "iterations per run"),
    "bench.transitions": Key("int", 500, "synthetic dataset size"),
    **_train_keys(),
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "gen-data": ("env.kind", "data.path"),
    "train": ("env.kind", "data.path", "out_dir"),
    "eval": ("env.kind", "eval.checkpoint", "out_dir"),
    "ablate": ("env.kind", "data.path", "out_dir"),
    "verify": ("out_dir",),
    "bench": ("out_dir",),
}

ENV_KINDS = ("grid_spread", "matrix", "tabular")


def flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    """Nested mappings become dotted keys; already-dotted keys pass through."""
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, kind: str, value):
    if isinstance(value, str) and kind != "str":
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "int" or (kind == "int_or_none" and value is not None):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            return None if value is None else str(value)
        if kind in ("list", "list_or_none"):
            if value is None and kind == "list_or_none":
                return None
            if not isinstance(value, list):
                raise TypeError
            return list(value)
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from exc


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]
    sources: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self, **overrides) -> TrainConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        kw.update(overrides)
        return TrainConfig(**kw)

    def echo(self) -> dict:
        return dict(sorted(self.values.items()))


def load_yaml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML in {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    return flatten(doc)


def build(command: str, file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge defaults, file keys and flag keys (flags win), then validate."""
    if command not in COMMANDS:
        raise ConfigError(f"command: unknown command {command!r}")
    values = {k: spec.default for k, spec in SCHEMA.items()}
    sources = {k: "default" for k in SCHEMA}
    for origin, layer in (("file", file_values or {}), ("flag", flag_values or {})):
        for key, raw in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"{key}: unknown configuration key")
            values[key] = _coerce(key, SCHEMA[key].kind, raw)
            sources[key] = origin
    if sources["train.seed"] == "default":
        values["train.seed"] = values["seed"]
    missing = [k for k in REQUIRED[command] if values[k] is None]
    if missing:
        raise ConfigError(f"missing required keys for {command}: {', '.join(missing)}")
    cfg = RunConfig(command, values, sources)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["env.kind"] is not None and v["env.kind"] not in ENV_KINDS:
        raise ConfigError(f"env.kind: must be one of {ENV_KINDS}")
    for key in ("env.n", "env.horizon", "env.actions", "env.states", "data.size", "eval.episodes",
                "verify.instances", "verify.contraction_instances", "verify.pairs", "bench.iterations",
                "bench.transitions"):
        if v[key] < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if v["env.grid_side"] < 2:
        raise ConfigError("env.grid_side: must be >= 2")
    if v["env.payoff"] not in ("all_equal", "all_top"):
        raise ConfigError("env.payoff: must be all_equal or all_top")
    if v["data.tier"] not in ("expert", "medium", "medium_replay", "random"):
        raise ConfigError("data.tier: unknown tier")
    if not v["ablate.seeds"]:
        raise ConfigError("ablate.seeds: need at least one seed")
    if any(int(n) < 1 for n in v["bench.agents"]):
        raise ConfigError("bench.agents: agent counts must be >= 1")
    try:
        cfg.train_config().validate(v["env.n"] if v["env.kind"] else None)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc}") from exc
