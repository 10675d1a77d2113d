"""
Run configuration: one flat ``key = value`` text format for every knob.

Keys are the field names of :class:`ModelConfig`, :class:`TrainConfig`,
:class:`AblationConfig` and :class:`DataConfig` (they do not collide).
Blank lines and ``#`` comments are ignored. Values resolve with the
precedence command line > config file > defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .model import AblationConfig, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    overlap: float = 0.5
    per_class: int = 200
    normalize: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    _SECTIONS = ("model", "train", "ablation", "data")

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for sec in self._SECTIONS:
            out.update(dataclasses.asdict(getattr(self, sec)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.flat().items())

    def override(self, values: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with ``values`` (already typed or raw strings) applied."""
        owner = _field_owner()
        per_sec: dict[str, dict[str, Any]] = {s: {} for s in self._SECTIONS}
        for key, raw in values.items():
            if key not in owner:
                raise ConfigError(f"unknown config key '{key}'")
            sec, ftype = owner[key]
            per_sec[sec][key] = _coerce(key, raw, ftype)
        changes = {}
        for sec, vals in per_sec.items():
            if vals:
                try:
                    changes[sec] = replace(getattr(self, sec), **vals)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(str(exc)) from exc
        return replace(self, **changes)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).override(parse_text(text))

    @classmethod
    def from_file(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_text(text, base)


def _field_owner() -> dict[str, tuple[str, Any]]:
    owner = {}
    for sec, dc in (("model", ModelConfig), ("train", TrainConfig),
                    ("ablation", AblationConfig), ("data", DataConfig)):
        for f in fields(dc):
            owner[f.name] = (sec, f.type)
    return owner


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: Any, ftype) -> Any:
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if not isinstance(raw, str):
        return raw
    try:
        if name == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r} (expected {name})") from None
