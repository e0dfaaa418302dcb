"""Run configuration and its ``key = value`` text form.

Nested sections serialize with dotted keys (``schedule.T_i = 2000``).
Values are parsed according to the declared field type, so a config file
round-trips exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

from .engine import ARCHITECTURES, EEConfig
from .generator import PGConfig

EE_STRATEGIES = ("scratch", "seeded", "noreset")
PG_STRATEGIES = ("retrain", "noretrain")
SN_POLICIES = ("learning_phase_only", "full", "none")
DEFAULT_T_E = {"scratch": 250, "seeded": 200, "noreset": 50}
DEFAULT_EE_LR = {"tensor_film": 1e-3, "tensor": 5e-4, "vector": 1e-4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ResetStrategy:
    ee: str = "scratch"
    pg: str = "retrain"
    sn: str = "learning_phase_only"

    def __post_init__(self):
        if self.ee not in EE_STRATEGIES:
            raise ConfigError(f"reset.ee must be one of {EE_STRATEGIES}, got {self.ee!r}")
        if self.pg not in PG_STRATEGIES:
            raise ConfigError(f"reset.pg must be one of {PG_STRATEGIES}, got {self.pg!r}")
        if self.sn not in SN_POLICIES:
            raise ConfigError(f"reset.sn must be one of {SN_POLICIES}, got {self.sn!r}")


@dataclass(frozen=True)
class PhaseSchedule:
    T_i: int = 2000
    T_t: int = 256_000
    T_p: int = 2000
    T_e: int = 0              # 0 selects the per-strategy default
    n_generations: int = 20
    batch_size: int = 128
    gt_per_batch: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "T_e":
                if v < 0:
                    raise ConfigError("schedule.T_e must be >= 0")
            elif v <= 0:
                raise ConfigError(f"schedule.{f.name} must be positive")
        if self.gt_per_batch > self.batch_size:
            raise ConfigError("gt_per_batch exceeds batch_size")

    def ee_steps(self, reset: ResetStrategy) -> int:
        return self.T_e or DEFAULT_T_E[reset.ee]


@dataclass(frozen=True)
class ModelSize:
    width: int = 64
    embed: int = 64
    film_hidden: int = 64
    cls_hidden: int = 64
    q_emb: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 256
    p_emb: int = 64
    attn: int = 256


@dataclass(frozen=True)
class RunConfig:
    data_seed: int = 0
    n_supervised: int = 20
    arch: str = "tensor_film"
    il_enabled: bool = True
    run_seed: int = 0
    pg_lr: float = 1e-4
    ee_lr: float = 0.0            # 0 selects the per-architecture default
    reinforce_weight: float = 10.0
    supervised_weight: float = 1.0
    reward_baseline: bool = False
    constrained: bool = True
    eval_every: int = 500
    eval_limit: int = 0           # 0 evaluates every example of a split
    train_eval_size: int = 1080
    baseline_steps: int = 0       # 0 matches the IL step budget
    data_path: str = ""
    reset: ResetStrategy = field(default_factory=ResetStrategy)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    model: ModelSize = field(default_factory=ModelSize)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.n_supervised < 0:
            raise ConfigError("n_supervised must be >= 0")
        if self.pg_lr <= 0 or self.ee_lr < 0:
            raise ConfigError("learning rates must be positive")
        if self.eval_every < 0 or self.eval_limit < 0 or self.train_eval_size < 0:
            raise ConfigError("evaluation sizes must be >= 0")

    @property
    def ee_learning_rate(self) -> float:
        return self.ee_lr or DEFAULT_EE_LR[self.arch]

    @property
    def ee_steps(self) -> int:
        return self.schedule.ee_steps(self.reset)

    @property
    def total_baseline_steps(self) -> int:
        s = self.schedule
        return self.baseline_steps or s.n_generations * (s.T_i + s.T_p + self.ee_steps)

    def pg_config(self) -> PGConfig:
        m = self.model
        return PGConfig(q_emb=m.q_emb, enc_hidden=m.enc_hidden, dec_hidden=m.dec_hidden,
                        p_emb=m.p_emb, attn=m.attn)

    def ee_config(self) -> EEConfig:
        m = self.model
        return EEConfig(arch=self.arch, width=m.width, embed=m.embed,
                        film_hidden=m.film_hidden, cls_hidden=m.cls_hidden)

    # ------------------------------------------------------------------
    # text form

    def to_items(self) -> list[tuple[str, Any]]:
        return list(_flatten(self))

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in pairs:
                raise ConfigError(f"line {n}: duplicate key {k!r}")
            pairs[k] = v
        return cls.from_mapping(pairs)

    @classmethod
    def from_mapping(cls, pairs: dict[str, str]) -> "RunConfig":
        return _build(cls, dict(pairs), "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def with_overrides(self, **pairs: str) -> "RunConfig":
        items = {k: _format(v) for k, v in self.to_items()}
        for k, v in pairs.items():
            if k not in items:
                raise ConfigError(f"unknown key {k!r}")
            items[k] = str(v)
        return RunConfig.from_mapping(items)


def _flatten(obj, prefix=""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, typ, key: str):
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _build(cls, pairs: dict[str, str], prefix: str):
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        typ = hints[f.name]
        if dataclasses.is_dataclass(typ):
            kwargs[f.name] = _build(typ, pairs, key + ".")
        elif key in pairs:
            kwargs[f.name] = _parse(pairs.pop(key), typ, key)
    if not prefix and pairs:
        raise ConfigError(f"unknown keys: {sorted(pairs)}")
    return cls(**kwargs)


__all__ = ["RunConfig", "ResetStrategy", "PhaseSchedule", "ModelSize", "ConfigError",
           "DEFAULT_T_E", "DEFAULT_EE_LR", "replace"]
