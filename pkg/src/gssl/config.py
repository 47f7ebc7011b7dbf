"""Flat ``key = value`` run configuration.

Training keys are bare (``epochs = 300``); the other sections are
prefixed: ``backbone.*``, ``data.*``, ``ldam.*``, ``pgd.*``, ``fixmatch.*``.
``#`` starts a comment.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import PGDConfig, parse_fraction
from .backbones import BackboneSpec
from .semisup import FixMatchConfig
from .train import LDAMConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass
class DataConfig:
    dataset: str = "cifar10"
    root: str = ""
    train_limit: int = 0
    test_limit: int = 0
    imbalance_rho: float = 1.0
    imbalance_seed: int = 0
    split_manifest: str = ""
    verify: bool = True


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    ldam: LDAMConfig = field(default_factory=LDAMConfig)
    pgd: PGDConfig = field(default_factory=PGDConfig)
    fixmatch: FixMatchConfig = field(default_factory=FixMatchConfig)

    def validate(self):
        for name, section in self._sections():
            try:
                if hasattr(section, "validate"):
                    section.validate()
            except ValueError as err:
                raise ConfigError(name or "train", str(err)) from None

    def _sections(self):
        yield "", self.train
        for name in ("backbone", "data", "ldam", "pgd", "fixmatch"):
            yield name, getattr(self, name)


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return parse_fraction(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(key, f"unsupported field type {typ}")


def _locate(run: RunConfig, key: str):
    prefix, dot, name = key.partition(".")
    if not dot:
        section, name = run.train, key
    elif prefix in ("backbone", "data", "ldam", "pgd", "fixmatch"):
        section = getattr(run, prefix)
    else:
        raise ConfigError(key, "unknown config key")
    hints = typing.get_type_hints(type(section))
    if name not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigError(key, "unknown config key")
    return section, name, hints[name]


def set_value(run: RunConfig, key: str, raw: str):
    section, name, typ = _locate(run, key.strip())
    setattr(section, name, _convert(key, raw, typ))


def parse_config(text: str, run: RunConfig | None = None) -> RunConfig:
    run = run or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        set_value(run, key.strip(), value)
    return run


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(None, f"config file not found: {path}")
    run = parse_config(path.read_text())
    for item in overrides or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(None, f"override must be key=value, got {item!r}")
        set_value(run, key.strip(), value)
    run.validate()
    return run


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(run: RunConfig) -> str:
    """Every key with its resolved value; ``parse_config`` reads it back unchanged."""
    lines = []
    for prefix, section in run._sections():
        for f in dataclasses.fields(section):
            key = f"{prefix}.{f.name}" if prefix else f.name
            lines.append(f"{key} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
