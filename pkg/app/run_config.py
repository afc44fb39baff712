from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple

from .model import PyramidConfig
from .pose import (
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_INLIER_THRESH_PX,
    DEFAULT_ITERS,
    DEFAULT_RESTARTS,
    DEFAULT_STRIDE,
)
from .training import TrainConfig

BASE_DIR = Path(__file__).resolve().parent.parent
DEFAULT_STORAGE_ROOT = "runtime/local"
GROUPS = ("dataset", "model", "train", "eval", "pose")


def _env_truthy(name: str, default: bool = False) -> bool:
    raw = str(os.getenv(name) or "").strip().lower()
    if not raw:
        return default
    return raw in {"1", "true", "yes", "on"}


def storage_root() -> Path:
    raw = str(os.getenv("DGC_STORAGE_ROOT") or "").strip()
    return Path(raw or (BASE_DIR / DEFAULT_STORAGE_ROOT)).resolve()


def log_level() -> str:
    if _env_truthy("DGC_DEBUG"):
        return "DEBUG"
    return str(os.getenv("DGC_LOG_LEVEL") or "INFO").strip().upper() or "INFO"


def resolve_path(raw: str | Path) -> Path:
    """Relative paths live under the storage root."""
    path = Path(raw)
    return path if path.is_absolute() else storage_root() / path


@dataclass(frozen=True)
class DatasetSettings:
    size: int = 200
    kinds: str = "affine,tps,homo"
    strength: float = 0.25
    seed: int = 0
    resolution: int = 64
    val_fraction: float = 0.1
    noise_std: float = 0.0
    pose: bool = False


@dataclass(frozen=True)
class EvalSettings:
    thresholds: Tuple[float, ...] = (1.0, 3.0, 5.0)
    masked: bool = True
    split: str = "val"


@dataclass(frozen=True)
class PoseSettings:
    iters: int = DEFAULT_ITERS
    restarts: int = DEFAULT_RESTARTS
    inlier_thresh_px: float = DEFAULT_INLIER_THRESH_PX
    stride: int = DEFAULT_STRIDE
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    outlier_fraction: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    model: PyramidConfig = field(default_factory=PyramidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    pose: PoseSettings = field(default_factory=PoseSettings)


# ---------------------------------------------------------------------------
# key=value text
# ---------------------------------------------------------------------------


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "/".join(format_value(item) for item in value)
        return ",".join(format_value(item) for item in value)
    return str(value)


def _parse_bool(raw: str) -> bool:
    clean = raw.strip().lower()
    if clean in {"1", "true", "yes", "on"}:
        return True
    if clean in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"invalid boolean: {raw}")


def parse_value(raw: str, like: Any) -> Any:
    """Parse `raw` into the type of the existing value `like`."""
    text = raw.strip()
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        if not text:
            return ()
        if like and isinstance(like[0], tuple):
            inner = like[0]
            return tuple(parse_value(part, inner) for part in text.split("/"))
        element = like[0] if like else 0.0
        return tuple(parse_value(part, element) for part in text.split(","))
    return text


def render_config(cfg: RunConfig) -> str:
    lines: List[str] = []
    for group in GROUPS:
        settings = getattr(cfg, group)
        for item in fields(settings):
            lines.append(f"{group}.{item.name}={format_value(getattr(settings, item.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_assignments(text: str) -> Dict[str, Dict[str, str]]:
    grouped: Dict[str, Dict[str, str]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        clean = line.split("#", 1)[0].strip()
        if not clean:
            continue
        key, sep, value = clean.partition("=")
        group, dot, name = key.strip().partition(".")
        if not sep or not dot or group not in GROUPS or not name:
            raise ValueError(f"invalid config line {number}: {line.strip()}")
        grouped.setdefault(group, {})[name.strip()] = value.strip()
    return grouped


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Dict[str, str]]) -> RunConfig:
    updated: Dict[str, Any] = {}
    for group, values in overrides.items():
        settings = getattr(cfg, group)
        known = {item.name for item in fields(settings)}
        changes: Dict[str, Any] = {}
        for name, raw in values.items():
            if name not in known:
                raise ValueError(f"unknown config key: {group}.{name}")
            changes[name] = parse_value(raw, getattr(settings, name))
        updated[group] = replace(settings, **changes)
    return replace(cfg, **updated)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    return apply_overrides(base or RunConfig(), parse_assignments(text))


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def model_config_lines(model: PyramidConfig) -> List[str]:
    return [f"model.{item.name}={format_value(getattr(model, item.name))}" for item in fields(model)]


def model_from_lines(lines: Dict[str, str]) -> PyramidConfig:
    return apply_overrides(RunConfig(), {"model": lines}).model
