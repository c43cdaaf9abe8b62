"""``key = value`` experiment configuration.

Lines starting with ``#`` are comments. Unknown keys are rejected, required
keys must be present, and every other key falls back to its default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from metano.errors import ConfigError
from metano.tasks import Family

METHODS = ("metano", "metano-minus", "metalast", "maml", "anil", "single", "pretrain-all", "pretrain-one")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _method_list(text: str) -> tuple[str, ...]:
    out = tuple(v.strip().lower() for v in text.split(",") if v.strip())
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise ConfigError(f"unknown method(s) {bad or text!r}; choose from {', '.join(METHODS)}")
    return out


def _family(text: str) -> Family:
    try:
        return Family[text.strip().upper()]
    except KeyError:
        raise ConfigError(f"unknown family {text!r}; choose reaction or diffusion") from None


@dataclass(frozen=True)
class ExperimentConfig:
    # required
    method: tuple[str, ...]
    family: Family
    M: int
    H: int
    n_context_train: int
    n_test_list: tuple[int, ...]
    d_h: int
    L: int
    k_max: int
    # problem
    dim: int = 1
    n_test_tasks: int = 2
    n_target_test: int = 100
    amplitude: float = 0.5
    # model
    d_Q: int = 0  # 0 means 4 * d_h
    # optimization
    lr: float = 1e-2
    lr_meta: float = 0.0  # 0 means lr
    lr_adapt: float = 0.0
    decay_rate: float = 0.5
    decay_every: int = 100
    weight_decay: float = 0.0
    epochs_meta: int = 1000
    epochs_adapt: int = 500
    epochs_finetune: int = 200
    epochs_single: int = 700
    epochs_pretrain: int = 1000
    finetune_lr_factor: float = 0.1
    shallow_to_deep: int = 0
    # gradient-based meta-learning
    epochs_gbml: int = 500
    inner_lr: float = 1e-2
    inner_steps: int = 1
    # protocol
    pretrain_sources: int = 5
    seed: int = 0
    repeats: int = 5

    def __post_init__(self):
        if self.family == Family.DIFFUSION and self.dim != 1:
            raise ConfigError("diffusion tasks are one-dimensional")
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        checks = {
            "M": self.M >= 2, "H": self.H >= 1, "n_context_train": self.n_context_train >= 1,
            "d_h": self.d_h >= 1, "L": self.L >= 1, "k_max": 0 <= 2 * self.k_max <= self.M,
            "n_test_tasks": self.n_test_tasks >= 1, "n_target_test": self.n_target_test >= 1,
            "repeats": self.repeats >= 1, "lr": self.lr > 0, "decay_rate": 0 < self.decay_rate <= 1,
            "n_test_list": bool(self.n_test_list) and min(self.n_test_list) >= 1,
            "amplitude": 0 < self.amplitude < 1, "pretrain_sources": self.pretrain_sources >= 1,
            "inner_steps": self.inner_steps >= 0, "shallow_to_deep": self.shallow_to_deep >= 0,
        }  # fmt: skip
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid value for {', '.join(bad)}")

    @property
    def max_context(self) -> int:
        return max(self.n_test_list)

    @property
    def d_Q_eff(self) -> int:
        return self.d_Q or 4 * self.d_h

    @property
    def n_sources(self) -> int:
        """Source tasks used by pretrain-one (capped at H)."""
        return min(self.pretrain_sources, self.H)

    def lr_for(self, phase: str) -> float:
        v = {"meta": self.lr_meta, "adapt": self.lr_adapt}.get(phase, 0.0)
        return v or self.lr

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def items(self) -> list[tuple[str, str]]:
        """Canonical ``(key, text)`` pairs, in declaration order."""
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, Family):
                text = v.name.lower()
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            out.append((f.name, text))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
REQUIRED = tuple(n for n, f in _FIELDS.items() if f.default is dataclasses.MISSING)
_PARSERS = {"method": _method_list, "family": _family, "n_test_list": _int_list}


def _convert(key: str, text: str):
    if key in _PARSERS:
        return _PARSERS[key](text)
    kind = {"int": int, "float": float}[_FIELDS[key].type]
    try:
        if kind is int and "e" in text.lower():
            value = float(text)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, val)
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _convert(key, val) if isinstance(val, str) else val
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    return ExperimentConfig(**values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
