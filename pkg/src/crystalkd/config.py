"""Training configuration: one flat record shared by every command.

Values are layered as built-in defaults < ``key=value`` config file < command
line flags. Keys in the file are the field names below (``lambda`` is
accepted as an alias of ``lam``).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

LOSS_NAMES = ("fr", "cr", "sg", "ntxent")

ABLATIONS = {
    "full": ("fr", "cr", "sg", "ntxent"),
    "node": ("fr", "cr"),
    "graph": ("sg", "ntxent"),
    "node+sg": ("fr", "cr", "sg"),
    "node+ntxent": ("fr", "cr", "ntxent"),
}

PRETRAIN_LR = 0.03
DISTILL_LR = 0.003
PRETRAIN_EPOCHS = 200
DISTILL_EPOCHS = 500


def parse_mask(text: str) -> tuple[str, ...]:
    """A preset name from :data:`ABLATIONS` or a comma list drawn from :data:`LOSS_NAMES`."""
    text = text.strip()
    if text in ABLATIONS:
        return ABLATIONS[text]
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in parts if p not in LOSS_NAMES]
    if bad:
        raise ConfigError(f"mask: unknown loss {bad[0]!r}; use a preset {sorted(ABLATIONS)} or a subset of {LOSS_NAMES}")
    if not parts:
        raise ConfigError("mask: all four losses are disabled")
    return tuple(n for n in LOSS_NAMES if n in parts)


@dataclass
class TrainConfig:
    # paths
    data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    extra_data: str | None = None
    out: str | None = None
    teacher: str | None = None
    student: str | None = None
    # synthetic corpus
    n: int = 64
    # architecture
    num_layers: int = 5
    embed_dim: int = 64
    student_layers: int | None = None
    student_dim: int | None = None
    # pre-training objective
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.25
    lam: float = 0.25
    tau: float = 0.5
    mask: str = "full"
    neg_ratio: float = 1.0
    # optimizer
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # loop
    epochs: int | None = None
    batch_size: int = 128
    seed: int = 0
    # distillation
    delta: float = 0.5
    # gradient check
    tolerance: float = 1e-4
    fd_eps: float = 1e-5
    gc_seeds: int = 1
    gc_samples: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(key, ok, what):
            if not ok:
                raise ConfigError(f"{key}: {what}, got {getattr(self, key)!r}")

        need("n", self.n >= 1, "must be >= 1")
        need("num_layers", self.num_layers >= 0, "must be >= 0")
        need("embed_dim", self.embed_dim >= 1, "must be >= 1")
        need("student_layers", self.student_layers is None or self.student_layers >= 0, "must be >= 0")
        need("student_dim", self.student_dim is None or self.student_dim >= 1, "must be >= 1")
        for key in ("alpha", "beta", "gamma", "lam"):
            v = getattr(self, key)
            need(key, math.isfinite(v) and v >= 0, "must be >= 0")
        need("tau", math.isfinite(self.tau) and self.tau > 0, "must be > 0")
        parse_mask(self.mask)
        need("neg_ratio", math.isfinite(self.neg_ratio) and self.neg_ratio >= 0, "must be >= 0")
        need("lr", self.lr is None or (math.isfinite(self.lr) and self.lr > 0), "must be > 0")
        need("beta1", 0 < self.beta1 < 1, "must be in (0, 1)")
        need("beta2", 0 < self.beta2 < 1, "must be in (0, 1)")
        need("adam_eps", self.adam_eps > 0, "must be > 0")
        need("epochs", self.epochs is None or self.epochs >= 1, "must be >= 1")
        need("batch_size", self.batch_size >= 1, "must be >= 1")
        need("seed", self.seed >= 0, "must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta outside [0,1]: {self.delta!r}")
        need("tolerance", self.tolerance > 0, "must be > 0")
        need("fd_eps", self.fd_eps > 0, "must be > 0")
        need("gc_seeds", self.gc_seeds >= 1, "must be >= 1")
        need("gc_samples", self.gc_samples >= 1, "must be >= 1")

    @property
    def loss_mask(self) -> tuple[str, ...]:
        return parse_mask(self.mask)

    def pretrain_lr(self) -> float:
        return self.lr if self.lr is not None else PRETRAIN_LR

    def distill_lr(self) -> float:
        return self.lr if self.lr is not None else DISTILL_LR

    def pretrain_epochs(self) -> int:
        return self.epochs if self.epochs is not None else PRETRAIN_EPOCHS

    def distill_epochs(self) -> int:
        return self.epochs if self.epochs is not None else DISTILL_EPOCHS

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Overlay string or typed values onto ``base`` (or the defaults)."""
        known = {f.name: f for f in fields(cls)}
        updates = {}
        for raw_key, raw in values.items():
            key = "lam" if raw_key == "lambda" else raw_key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"{raw_key}: unknown configuration key")
            updates[key] = _coerce(key, known[key].type, raw)
        base = base or cls()
        return dataclasses.replace(base, **updates)


def _coerce(key: str, type_name: str, raw: Any) -> Any:
    optional = "None" in str(type_name)
    if raw is None or (isinstance(raw, str) and optional and raw.strip().lower() in ("", "none")):
        if optional:
            return None
        raise ConfigError(f"{key}: a value is required")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if "int" in str(type_name):
            return int(text)
        if "float" in str(type_name):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {str(type_name).split(' |')[0]}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out
