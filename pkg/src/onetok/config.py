"""Run configuration: dataclasses mirroring the INI-style config file
(``[section]`` headers, ``key = value`` lines), strict parsing with
nearest-key suggestions, verbatim echo, and dotted ``--set`` overrides.
"""

import configparser
import difflib
import io
from dataclasses import dataclass, field, fields
from typing import Optional

from .data import DATASET_FORMATS, DatasetSpec
from .encoder import PARTITION_MODES, VitConfig
from .errors import ConfigError

PHASES = ("ssl", "stage_a", "stage_b")


@dataclass
class RunSection:
    phase: str = "stage_a"
    seed: int = 0
    steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-4
    warmup_steps: int = 2000
    weight_decay: float = 0.01
    lambda_: float = 0.5
    ema_decay: Optional[float] = 0.999
    eval_every: int = 500
    partition: str = "cls_only"
    ssl_temperature: float = 0.2
    token_index: int = 0


@dataclass
class DecoderSection:
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 6
    heads: int = 6
    time_embed_dim: int = 64


@dataclass
class MixerSection:
    hidden_dim: int = 256
    depth: int = 8
    token_mlp_expansion: int = 2
    channel_mlp_expansion: int = 4
    class_embed_dim: int = 64
    p_drop: float = 0.1
    time_embed_dim: int = 64


@dataclass
class SampleSection:
    nfe_decode: int = 20
    nfe_latent: int = 50
    cfg_scale: float = 1.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: VitConfig = field(default_factory=VitConfig)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    sample: SampleSection = field(default_factory=SampleSection)


# INI key <-> dataclass attribute renames ("lambda" is a Python keyword).
_KEY_TO_ATTR = {"lambda": "lambda_"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}


def _section_objects(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _coerce(section: str, key: str, raw: str, pytype) -> object:
    raw = raw.strip()
    try:
        if pytype is Optional[float]:
            return None if raw.lower() in ("none", "") else float(raw)
        if pytype is int:
            return int(raw)
        if pytype is float:
            return float(raw)
        if pytype is str:
            return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {pytype}")
    raise ConfigError(f"[{section}] {key}: unsupported field type {pytype}")


def _set_key(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    objects = _section_objects(cfg)
    if section not in objects:
        hint = difflib.get_close_matches(section, objects, n=1)
        extra = f"; did you mean [{hint[0]}]?" if hint else ""
        raise ConfigError(f"unknown config section [{section}]{extra}")
    obj = objects[section]
    attr = _KEY_TO_ATTR.get(key, key)
    valid = {f.name: f.type for f in fields(obj)}
    if attr not in valid:
        names = [_ATTR_TO_KEY.get(n, n) for n in valid]
        hint = difflib.get_close_matches(key, names, n=1)
        extra = f"; did you mean {hint[0]!r}?" if hint else ""
        raise ConfigError(f"unknown key {key!r} in section [{section}]{extra}")
    pytype = _field_type(obj, attr)
    setattr(obj, attr, _coerce(section, key, raw, pytype))


def _field_type(obj, attr):
    for f in fields(obj):
        if f.name == attr:
            t = f.type
            if isinstance(t, str):  # string annotations
                t = {"int": int, "float": float, "str": str, "Optional[float]": Optional[float]}[t]
            return t
    raise KeyError(attr)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.run.phase not in PHASES:
        raise ConfigError(f"[run] phase must be one of {PHASES}, got {cfg.run.phase!r}")
    if cfg.run.partition not in PARTITION_MODES:
        raise ConfigError(f"[run] partition must be one of {PARTITION_MODES}, got {cfg.run.partition!r}")
    if cfg.data.format not in DATASET_FORMATS:
        raise ConfigError(f"[data] format must be one of {DATASET_FORMATS}, got {cfg.data.format!r}")
    if cfg.run.lambda_ < 0:
        raise ConfigError(f"[run] lambda must be >= 0, got {cfg.run.lambda_}")
    if cfg.run.ema_decay is not None and not 0.0 < cfg.run.ema_decay < 1.0:
        raise ConfigError(f"[run] ema_decay must be in (0, 1) or none, got {cfg.run.ema_decay}")
    # re-run dataclass validation for values set after construction
    cfg.data.__post_init__()
    cfg.encoder.__post_init__()
    return cfg


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax error: {e}")
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set_key(cfg, section, key, raw)
    return _validate(cfg)


def parse_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply ``section.key=value`` strings in order."""
    for item in overrides:
        head, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, dot, key = head.strip().partition(".")
        if not dot:
            raise ConfigError(f"override key {head!r} must be section.key")
        _set_key(cfg, section, key.strip(), raw)
    return _validate(cfg)


def format_config(cfg: RunConfig) -> str:
    """Full echo with every key explicit; re-parses to an equal RunConfig."""
    out = io.StringIO()
    for section, obj in _section_objects(cfg).items():
        out.write(f"[{section}]\n")
        for f in fields(obj):
            key = _ATTR_TO_KEY.get(f.name, f.name)
            value = getattr(obj, f.name)
            if value is None:
                value = "none"
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()
