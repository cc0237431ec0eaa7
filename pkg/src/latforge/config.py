"""Run configuration and its flat ``section.key = value`` text format.

Every key has a default except :data:`REQUIRED`. The canonical text lists all
keys sorted with normalised values, so semantically identical files hash the
same.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .model import ModelConfig


class ConfigError(ValueError):
    pass


REQUIRED = ("task.setting", "task.seed", "loss.kind")


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_context: int = 64
    init_seed: int = 0


@dataclass(frozen=True)
class TaskSection:
    setting: str = "refusal"  # refusal | backdoor | unlearn
    seed: int = 1
    pairs: int = 256
    benign: int = 256
    poisoned: int = 400
    eval: int = 64
    forget: int = 256
    retain: int = 256
    rho: float = 0.25
    trigger: tuple = (6, 7, 8)
    proxy_trigger: bool = False


@dataclass(frozen=True)
class LossSection:
    kind: str = "rt"  # rt | dpo | unlearn-ga | rmu | sft
    beta: float = 0.1
    train_roles: tuple = ()  # sft only


@dataclass(frozen=True)
class BenignSection:
    mode: str = "sft-interleave"  # sft-interleave | kl-penalty | none
    weight: float = 1.0
    ratio: int = 1


@dataclass(frozen=True)
class AttackSection:
    enabled: bool = True
    epsilon: float = 1.0
    steps: int = 16
    step_size: float = 0.0  # 0 means epsilon / 4
    mode: str = "targeted"
    init: str = "zero"
    norm_scope: str = "position"
    profile: str = "even"
    sites: int = 4
    site_list: tuple = ()  # explicit layer indices override profile
    whiten: bool = False
    whiten_ridge: float = 1e-4
    whiten_samples: int = 8


@dataclass(frozen=True)
class OptimSection:
    lr: float = 3e-3
    momentum: float = 0.9
    grad_clip: float = 0.0


@dataclass(frozen=True)
class TrainSection:
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 50
    checkpoint_every: int = 0
    max_nan_frac: float = 0.05


@dataclass(frozen=True)
class RmuSection:
    coeff: float = 6.5
    alpha: float = 1200.0
    layer: int = 2
    seed: int = 0


@dataclass(frozen=True)
class RelearnSection:
    n_examples: int = 2
    iters: int = 20
    eval_at: tuple = (5, 10, 20)
    lr: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class PathsSection:
    data_dir: str = "data"
    init_checkpoint: str = ""


_SECTIONS = {
    "model": ModelSection, "task": TaskSection, "loss": LossSection, "benign": BenignSection,
    "attack": AttackSection, "optim": OptimSection, "train": TrainSection, "rmu": RmuSection,
    "relearn": RelearnSection, "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskSection = field(default_factory=TaskSection)
    loss: LossSection = field(default_factory=LossSection)
    benign: BenignSection = field(default_factory=BenignSection)
    attack: AttackSection = field(default_factory=AttackSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    rmu: RmuSection = field(default_factory=RmuSection)
    relearn: RelearnSection = field(default_factory=RelearnSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.n_layers, m.d_model, m.n_heads, m.vocab_size, m.max_context)

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any], require: bool = False) -> "RunConfig":
        if require:
            for key in REQUIRED:
                if key not in flat:
                    raise ConfigError(f"missing config key: {key}")
        grouped: dict[str, dict] = {s: {} for s in _SECTIONS}
        for key, value in flat.items():
            sec, _, name = key.partition(".")
            if sec not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[sec])}:
                raise ConfigError(f"unknown config key: {key}")
            default = getattr(_SECTIONS[sec](), name)
            grouped[sec][name] = _coerce(key, value, default)
        return cls(**{s: _SECTIONS[s](**kw) for s, kw in grouped.items()})

    def with_overrides(self, **flat) -> "RunConfig":
        merged = self.to_flat()
        merged.update({k.replace("__", "."): v for k, v in flat.items()})
        return RunConfig.from_flat(merged)

    def validate(self) -> "RunConfig":
        """Reject enumerations and ranges the trainer cannot run; returns self."""
        choices = {
            "task.setting": ("refusal", "backdoor", "unlearn"),
            "loss.kind": ("rt", "dpo", "unlearn-ga", "rmu", "sft"),
            "benign.mode": ("sft-interleave", "kl-penalty", "none"),
            "attack.mode": ("targeted", "untargeted"),
            "attack.init": ("zero", "uniform-in-ball"),
            "attack.norm_scope": ("position", "aggregate"),
            "attack.profile": ("even", "jailbreak32", "backdoor32"),
        }
        flat = self.to_flat()
        for key, allowed in choices.items():
            if flat[key] not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {flat[key]!r}")
        for key in ("attack.epsilon", "attack.steps", "attack.step_size", "optim.lr", "optim.grad_clip",
                    "train.steps", "train.eval_every", "train.checkpoint_every", "benign.weight", "benign.ratio",
                    "relearn.iters", "relearn.lr", "task.rho"):
            if flat[key] < 0:
                raise ConfigError(f"{key} must be non-negative; got {flat[key]!r}")
        for key in ("train.batch_size", "relearn.n_examples", "model.n_layers", "model.d_model", "model.n_heads"):
            if flat[key] < 1:
                raise ConfigError(f"{key} must be positive; got {flat[key]!r}")
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.task.rho > 1:
            raise ConfigError("task.rho must lie in [0, 1]")
        return self

    def canonical_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.to_flat().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, (tuple, list)):
                items = list(value)
            else:
                items = [x for x in str(value).replace(" ", "").split(",") if x]
            if key in ("loss.train_roles",):
                return tuple(str(x) for x in items)
            return tuple(int(x) for x in items)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_text(text: str) -> dict[str, str]:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        flat[key] = value.strip()
    return flat


def loads(text: str, require: bool = True) -> RunConfig:
    return RunConfig.from_flat(parse_text(text), require=require)


def load(path, require: bool = True) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read(), require=require)


def dumps(cfg: RunConfig) -> str:
    return cfg.canonical_text()


__all__ = ["RunConfig", "ConfigError", "load", "loads", "dumps", "parse_text", "replace"]
