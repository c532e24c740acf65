"""Run configuration: ``key = value`` files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .model import GRID_EXTENT, GRID_STEPS

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    d_max: float | None = None
    bins: int = 300
    grid_extent: float = GRID_EXTENT
    grid_steps: int = GRID_STEPS
    features: int = 64
    rbf: int = 300
    interactions: int = 9
    batch: int = 20
    t_train: float = 1.0
    t_gen: float = 0.01
    lr: float = 1e-3
    iters: int = 1000
    val_interval: int = 1000
    val_samples: int = 50
    checkpoint_interval: int = 0
    threads: int = 1
    n_train: int | None = None
    train_fraction: float | None = None
    count: int = 10
    composition: str = "C7O2H10"
    data: str | None = None
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.tsv"
    out: str = "generated.xyz"
    trace: str | None = None

    @property
    def grid_diagonal(self):
        return math.sqrt(3) * 2 * self.grid_extent

    @property
    def effective_d_max(self):
        return self.grid_diagonal if self.d_max is None else self.d_max

    def check(self):
        if self.d_max is not None and abs(self.d_max - self.grid_diagonal) > 1e-9:
            log.warning(
                "d_max=%.6f differs from the grid diagonal %.6f; distances beyond d_max fall in the last bin",
                self.d_max,
                self.grid_diagonal,
            )
        for name in ("batch", "val_interval", "grid_steps", "bins", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.t_gen <= 0 or self.t_train <= 0:
            raise ConfigError("temperatures must be positive")
        return self

    def lines(self):
        return [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]


def _convert(field, text):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if text.lower() in ("none", "") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {field.name}: {text!r}") from None
    return text


def parse_config_text(text):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in fields:
            raise ConfigError(f"config line {lineno}: cannot parse {raw!r}")
        values[key] = _convert(fields[key], value.strip())
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the config file, then non-None ``overrides`` (flags win)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig(**values).check()
