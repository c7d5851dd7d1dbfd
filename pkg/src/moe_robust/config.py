"""Run configuration: a YAML key-value tree resolved strictly into dataclasses.

Unknown keys are fatal.  The canonical serialization (sorted-key compact
JSON of the resolved tree) is hashed into the digests stored in checkpoints
and run manifests.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .attacks import AttackConfig
from .data import Dataset, load_cifar100, make_synthetic, subset
from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" | "cifar100"
    root: str | None = None  # cifar100 only; falls back to $CIFAR100_ROOT
    classes: int = 10
    per_class: int = 100
    eval_per_class: int = 20
    shape: tuple[int, int, int] = (3, 32, 32)
    separation: float = 1.0
    noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.kind not in ("synthetic", "cifar100"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'cifar100', got {self.kind!r}")


def _default_attacks() -> dict[str, AttackConfig]:
    return {
        "pgd20": AttackConfig("pgd", 8 / 255, 20, 2 / 255, True),
        "autopgd": AttackConfig("autopgd", 8 / 255, 20, 2 / 255, True),
    }


@dataclass
class EvalConfig:
    attacks: dict[str, AttackConfig] = field(default_factory=_default_attacks)
    batch_size: int = 256


@dataclass
class CostConfig:
    arch: str = "resnet18"
    expert_kind: str = "block"
    gate_kind: str = "gap_fc"
    stage: str = "conv5_x"
    block_index: int = 1
    conv_index: int | None = None
    expert_counts: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    ks: list[str] = field(default_factory=lambda: ["1", "N/2", "N"])


@dataclass
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    cost: CostConfig = field(default_factory=CostConfig)


# -- strict resolution -----------------------------------------------------------


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        if len(inner) == 1:
            return _convert(inner[0], value, path)
        return value
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping, got {value!r}")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return {str(k): _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if origin is tuple:
        return tuple(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp is str and isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    return value


def _build(cls, raw: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError("unknown config keys: " + ", ".join(prefix + k for k in unknown))
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``dotted.key=value`` in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a mapping")
    node[parts[-1]] = yaml.safe_load(text)


def resolve(raw: dict | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    for o in overrides:
        apply_override(raw, o)
    if seed is not None:
        raw["seed"] = seed
    if "seed" in (raw.get("train") or {}):
        raise ConfigError("unknown config keys: train.seed (use the top-level seed)")
    cfg = _build(RunConfig, raw, "")
    cfg.train.seed = cfg.seed
    return cfg


def load_config(path: str | Path, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return resolve(raw, overrides, seed)


def to_tree(obj) -> Any:
    """Plain nested dict/list view of a resolved config (tuples become lists)."""
    return json.loads(json.dumps(asdict(obj) if dataclasses.is_dataclass(obj) else obj))


def canonical(obj) -> str:
    return json.dumps(to_tree(obj), sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


def model_digest(cfg: RunConfig) -> str:
    return digest(cfg.model)


def dump_yaml(cfg: RunConfig) -> str:
    tree = to_tree(cfg)
    tree["train"].pop("seed", None)
    return yaml.safe_dump(tree, sort_keys=True)


def load_datasets(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Train and eval datasets described by ``cfg``."""
    if cfg.kind == "synthetic":
        tr = make_synthetic(cfg.classes, cfg.per_class, cfg.shape, cfg.seed, cfg.separation, cfg.noise, "train")
        te = make_synthetic(cfg.classes, cfg.eval_per_class, cfg.shape, cfg.seed, cfg.separation, cfg.noise, "test")
        return tr, te
    classes = list(range(cfg.classes))
    tr = load_cifar100(cfg.root, "train").relabel(classes)
    te = load_cifar100(cfg.root, "test").relabel(classes)
    tr = subset(tr, cfg.per_class, cfg.seed)
    if cfg.eval_per_class:
        te = subset(te, cfg.eval_per_class, cfg.seed)
    return tr, te
