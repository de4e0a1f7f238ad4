"""
Run configuration: a UTF-8 ``key = value`` file plus command-line overrides.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. The
canonical text form lists every key once, in declaration order, so
``parse(cfg.canonical()) == cfg`` and canonical text round-trips unchanged.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import SCALES
from .phases import MODES, BilevelConfig

COMMANDS = ("gen", "learn", "adapt", "test", "gradcheck", "oracle")
DECODER_INITS = ("auto", "meta", "random", "learned")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    scale: str = "tiny"
    mode: str = "BL"
    workdir: str = "work"
    checkpoints: str = "checkpoints"
    reports: str = "reports"
    scenes: str = "C,D,E"
    decoder_init: str = "auto"
    dump_images: bool = True
    xi: float = 1e-3
    eps: Optional[float] = None
    eps_scale: float = 1e-2
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    learn_epochs: int = 12
    adapt_epochs: int = 20
    episode_len: int = 5
    prox_weight: float = 1.0
    clip_norm: Optional[float] = 5.0
    inner_optimizer: str = "adam"
    freeze_bn_stats: bool = True
    finetune_denoiser: bool = False
    denoiser_width: int = 8
    uns_lambda: float = 0.2
    uns_sigma: float = 0.1

    def __post_init__(self):
        if self.command not in ("",) + COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}; expected one of {', '.join(SCALES)}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.decoder_init not in DECODER_INITS:
            raise ConfigError(f"decoder_init must be one of {', '.join(DECODER_INITS)}")
        if not self.scene_list:
            raise ConfigError("scenes must name at least one scene")
        try:
            self.bilevel()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def scene_list(self) -> list:
        return [s.strip() for s in self.scenes.split(",") if s.strip()]

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / self.checkpoints

    @property
    def report_dir(self) -> Path:
        return self.root / self.reports

    def bilevel(self) -> BilevelConfig:
        names = {f.name for f in fields(BilevelConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return BilevelConfig(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


_HINTS = typing.get_type_hints(RunConfig)


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    hint = _HINTS[key]
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    base = next(a for a in typing.get_args(hint) if a is not type(None)) if optional else hint
    raw = text.strip()
    if optional and raw.lower() == "none":
        return None
    try:
        if base is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None
    return raw


def parse_pairs(pairs, source: str = "<config>") -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, key, value in pairs:
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def _lines(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        yield lineno, key.strip(), value.strip()


def parse(text: str, source: str = "<config>", **overrides) -> RunConfig:
    values = parse_pairs(_lines(text), source)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_HINTS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return RunConfig(**values)


def load(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not valid UTF-8") from exc
    return parse(text, str(path), **overrides)
