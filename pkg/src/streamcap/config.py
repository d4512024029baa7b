"""Serializable run configuration with dotted ``key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .codec import CodecConfig
from .inference import DecodeConfig
from .model import ModelConfig
from .synth import SynthSpec
from .training import TrainConfig

RUN_CONFIG_FORMAT = 1
_SECTIONS = {
    "model": ModelConfig,
    "codec": CodecConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "synth": SynthSpec,
}


class ConfigOverrideError(ValueError):
    pass


@dataclass
class Paths:
    dataset: str = ""
    checkpoint: str = ""
    output: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = RUN_CONFIG_FORMAT
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("format_version", RUN_CONFIG_FORMAT)
        if version != RUN_CONFIG_FORMAT:
            raise ValueError(f"unsupported run config format {version}")
        kw = {}
        for name, kind in list(_SECTIONS.items()) + [("paths", Paths)]:
            if name in d:
                known = {f.name for f in fields(kind)}
                unknown = set(d[name]) - known
                if unknown:
                    raise ConfigOverrideError(f"unknown {name} keys: {sorted(unknown)}")
                kw[name] = kind(**d[name])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    d = cfg.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigOverrideError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigOverrideError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigOverrideError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    try:
        return RunConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigOverrideError(str(exc)) from None

