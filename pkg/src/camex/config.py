"""Training configuration and its flat TOML file form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .merging import MergeSpec

VARIANTS = ("merge", "dynamic", "smoe")
TASKS = ("markov_lm", "clustered")
GRANULARITIES = ("segment", "sequence")

# MergeSpec field -> flat key
_MERGE_KEYS = {
    "protocol": "protocol",
    "alpha": "alpha",
    "ca_enabled": "ca_enabled",
    "dare_drop_prob": "dare_drop_prob",
    "ties_trim_fraction": "ties_trim_fraction",
    "rng_seed": "merge_seed",
    "ties_sign_multiplier": "ties_sign_multiplier",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # architecture
    variant: str = "merge"
    n_experts: int = 8
    layers: int = 2
    d_model: int = 16
    d_ff: int = 32
    top_k: int = 2
    kronecker_rank: int = 1
    share_curvature: bool = False
    granularity: str = "segment"
    activation: str = "gelu"
    # data
    task: str = "markov_lm"
    vocab: int = 16
    regimes: int = 2
    seq_len: int = 64
    segment_len: int = 16
    switch_prob: float = 0.5
    concentration: float = 0.1
    n_train: int = 512
    n_eval: int = 128
    # optimisation (AdamW, linear warm-up then linear decay)
    lr: float = 1e-2
    batch_size: int = 8
    epochs: int = 1
    steps: int = 200
    warmup_steps: int = 16
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    seed: int = 0
    merge: MergeSpec = field(default_factory=MergeSpec)

    def __post_init__(self):
        self.validate()

    @property
    def alpha(self) -> float:
        return self.merge.alpha

    @property
    def uses_curvature(self) -> bool:
        return self.variant != "smoe" and self.merge.ca_enabled and self.kronecker_rank > 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        positive = ("n_experts", "layers", "d_model", "d_ff", "vocab", "regimes", "seq_len",
                    "segment_len", "n_train", "n_eval", "batch_size", "epochs", "top_k")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_experts < 2:
            raise ConfigError("n_experts must be >= 2")
        if self.kronecker_rank < 0 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("kronecker_rank, steps and warmup_steps must be nonnegative")
        if self.seq_len % self.segment_len:
            raise ConfigError("segment_len must divide seq_len")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1, beta2 must lie in [0, 1)")
        if not 0 <= self.switch_prob <= 1:
            raise ConfigError("switch_prob must lie in [0, 1]")
        if self.variant == "smoe" and self.top_k > self.n_experts:
            raise ConfigError("top_k exceeds n_experts")
        if self.merge.ca_enabled and self.kronecker_rank == 0:
            raise ConfigError("ca_enabled needs kronecker_rank >= 1")

    # ------------------------------------------------------------ flat form
    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "merge"}
        for attr, key in _MERGE_KEYS.items():
            flat[key] = getattr(self.merge, attr)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls) if f.name != "merge"}
        unknown = set(flat) - set(known) - set(_MERGE_KEYS.values())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merge_fields = {f.name: f for f in dataclasses.fields(MergeSpec)}
        merge_kwargs = {attr: _coerce(merge_fields[attr], flat[key], key)
                        for attr, key in _MERGE_KEYS.items() if key in flat}
        kwargs = {}
        for name, value in flat.items():
            if name in known:
                kwargs[name] = _coerce(known[name], value, name)
        try:
            merge = MergeSpec(**merge_kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kwargs, merge=merge)

    def replace(self, **changes) -> "TrainConfig":
        flat = self.to_flat()
        flat.update(changes)
        return TrainConfig.from_flat(flat)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _coerce(f: dataclasses.Field, value, key: str):
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def dumps(cfg: TrainConfig) -> str:
    return tomli_w.dumps(cfg.to_flat())


def loads(text: str) -> TrainConfig:
    try:
        return TrainConfig.from_flat(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def load(path) -> TrainConfig:
    return loads(Path(path).read_text())


def save(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
