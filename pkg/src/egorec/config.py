"""Training configuration and the flat ``key = value`` config format.

Keys may be written with dashes or underscores (``item-graph-normalize = true``).
Lines starting with ``#`` are comments. Precedence is defaults < file < overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    dim: int = 64
    layers: int = 3
    knn_k: int = 10
    reg_weight: float = 1e-2
    cl_weight: float = 1e-2
    tau: float = 0.2
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 2024
    item_graph: bool = True
    item_graph_normalize: bool = True
    feature_projection: bool = False
    reg_all_params: bool = False
    cl_pool: str = "batch"
    reduction: str = "mean"
    deterministic: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("lr", "tau"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0 (got {getattr(self, name)})")
        for name in ("dim", "knn_k", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        for name in ("layers", "patience"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        for name in ("reg_weight", "cl_weight"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        if self.cl_weight > 0 and self.layers < 1:
            out.append("cl_weight > 0 needs layers >= 1 (no neighbor layers to align)")
        if self.cl_pool not in ("batch", "full"):
            out.append(f"cl_pool must be 'batch' or 'full' (got {self.cl_pool!r})")
        if self.reduction not in ("mean", "sum"):
            out.append(f"reduction must be 'mean' or 'sum' (got {self.reduction!r})")
        return out

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def _coerce(name: str, raw):
    kind = _TYPES[_FIELDS[name].type]
    if isinstance(raw, str):
        raw = raw.strip()
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ValueError(f"not an integer: {raw!r}")
            return int(value)
        return kind(raw)
    if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if not isinstance(raw, kind):
        raise ValueError(f"expected {kind.__name__}, got {raw!r}")
    return raw


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {line!r}"])
        key, value = line.split("=", 1)
        out[normalize_key(key)] = value.strip()
    return out


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{name.replace('_', '-')} = {value}")
    return "\n".join(lines) + "\n"


def build_config(file_values: dict | None = None, overrides: dict | None = None,
                 base: TrainConfig | None = None) -> TrainConfig:
    """Layer ``file_values`` then ``overrides`` on top of ``base``; report every bad key."""
    merged = (base or TrainConfig()).to_dict()
    problems = []
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            name = normalize_key(key)
            if name not in _FIELDS:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                merged[name] = _coerce(name, raw)
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
    try:
        config = TrainConfig(**merged)
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    return config


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    file_values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    return build_config(file_values, overrides)
