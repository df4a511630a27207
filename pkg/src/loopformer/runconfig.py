"""Run configuration: flat INI-style sections with presets and strict keys.

Four sections — model, train, eval, diagnostics — each backed by a
dataclass with every field defaulted. Unknown sections or keys are
rejected, and the effective configuration can be dumped back to text that
parses to the same values (the dump is echoed into every run directory).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass

from .model import ModelConfig
from .training import TrainConfig


@dataclass
class EvalConfig:
    budget: int = 0  # 0: use the model's max_loops
    schedule: str = "uniform"
    stride: int = 0  # 0: context_length // 2
    eval_tokens: int = 65536  # cap on evaluated tokens


@dataclass
class DiagConfig:
    budget: int = 0  # 0: use the model's max_loops
    tail_tokens: int = 64  # token positions per prompt entering the metrics
    prompts: int = 8


@dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    diagnostics: DiagConfig = dataclasses.field(default_factory=DiagConfig)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "diagnostics": DiagConfig,
}

PRESETS = {
    "desk": {},
    "paper-1b": {
        "model": dict(
            vocab_size=50257,
            context_length=1024,
            d_model=2048,
            n_heads=32,
            d_ff=5120,
            blocks_per_loop=3,
            max_loops=8,
        ),
        "train": dict(total_steps=50000, warmup_steps=4000, batch_size=48),
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    rc = RunConfig()
    for section, overrides in PRESETS[name].items():
        setattr(rc, section, dataclasses.replace(getattr(rc, section), **overrides))
    return rc


def _parse_value(kind, raw: str, where: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ValueError(f"{where}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def _field_types(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _apply(values: dict, section: str, key: str, raw: str):
    cls = _SECTIONS[section]
    types = _field_types(cls)
    if key not in types:
        raise ValueError(f"unknown config key [{section}] {key}")
    kind = types[key]
    if isinstance(kind, str):  # dataclass stores annotations as strings
        kind = _TYPE_NAMES.get(kind, str)
    values.setdefault(section, {})[key] = _parse_value(kind, raw, f"[{section}] {key}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ValueError(f"malformed config: {err}") from None
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            _apply(values, section, key, raw)
    rc = base if base is not None else RunConfig()
    for section, overrides in values.items():
        setattr(rc, section, dataclasses.replace(getattr(rc, section), **overrides))
    return rc


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def apply_overrides(rc: RunConfig, overrides) -> RunConfig:
    """Apply 'section.key=value' strings (CLI flags) on top of a RunConfig."""
    values: dict = {}
    for item in overrides:
        head, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        section, dot, key = head.strip().partition(".")
        if not dot or section not in _SECTIONS:
            raise ValueError(f"override {item!r} needs a section prefix, e.g. model.d_model=64")
        _apply(values, section, key.strip(), raw)
    for section, vals in values.items():
        setattr(rc, section, dataclasses.replace(getattr(rc, section), **vals))
    return rc


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(rc: RunConfig) -> str:
    """Canonical text form; parse_config_text(dump_config(rc)) == rc."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        obj = getattr(rc, section)
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(cls):
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()
