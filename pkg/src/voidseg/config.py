"""Flat ``section.key=value`` run configuration.

Every tunable constant of the pipeline is addressable by a dotted key, e.g.
``synth.VC_max=4`` or ``extraction.search_range=5``.  Unknown keys are
errors.  ``dump`` writes the effective configuration in the same format, so
a snapshot can be fed back in to rerun a command.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .extraction import ExtractionConfig
from .groundtruth import LabelConfig
from .segnet import TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class PostConfig:
    threshold: float = 0.5
    a_min: int = 9
    iou_min: float = 0.3


@dataclass
class RunConfig:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    post: PostConfig = field(default_factory=PostConfig)

    def keys(self) -> list[str]:
        return [f"{s.name}.{f.name}" for s in fields(self) for f in fields(getattr(self, s.name))]

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, raw) -> None:
        section, name = _split_key(key)
        if section not in {s.name for s in fields(self)}:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
        obj = getattr(self, section)
        known = {f.name: f for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(raw, getattr(obj, name), known[name].type, key)
        # rebuild so dataclass validation in __post_init__ runs again
        setattr(self, section, dataclasses.replace(obj, **{name: value}))

    def update(self, pairs: dict, default_section: str | None = None) -> RunConfig:
        for k, v in pairs.items():
            if "." not in k and default_section:
                k = f"{default_section}.{k}"
            self.set(k, v)
        return self

    def dump(self) -> str:
        lines = []
        for key in self.keys():
            v = self.get(key)
            lines.append(f"{key}={_format(v)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


def _split_key(key: str):
    if "." not in key:
        raise ConfigError(f"config key {key!r} needs a section, e.g. synth.{key}")
    section, name = key.split(".", 1)
    return section, name


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw, current, annotation, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    if text.lower() in ("none", "null", "") and ("None" in ann or current is None):
        return None
    try:
        if "bool" in ann:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in ann and "float" not in ann:
            return int(text)
        if "float" in ann or "int" in ann:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ann}") from None
    return text


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path=None, overrides=(), default_section: str | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` ("k=v" strings)."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_pairs(path.read_text(), str(path)), default_section)
    cfg.update(parse_pairs("\n".join(overrides), "--set"), default_section)
    return cfg
