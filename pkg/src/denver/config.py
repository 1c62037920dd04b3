"""Run configuration: one INI file with a section per pipeline component.

Every section maps onto a config dataclass. ``[run]`` holds the global seed,
which is copied into every component that draws random numbers, and the
``DENVER_SEED`` environment variable overrides it.
"""

from __future__ import annotations

import configparser
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from denver.errors import ConfigError
from denver.optical_flow import FlowProviderConfig
from denver.stage1_background import Stage1Config
from denver.stage2_decompose import Stage2Config
from denver.synth_gen import SynthConfig
from denver.vessel_prior import PriorConfig, VesselnessConfig

SEED_ENV = "DENVER_SEED"
SYNTH_INPUT = "synth"


@dataclass
class RunSettings:
    seed: int = 0
    input: str = SYNTH_INPUT  # "synth" or a directory of frames
    output: str = "runs/default"
    gt_dir: str = ""  # ground-truth masks for a frame directory input
    annotated: str = "auto"  # "auto" or comma-separated frame indices
    annotated_fraction: float = 0.5
    tau: float = 2.0

    def validate(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 < self.annotated_fraction <= 1:
            raise ConfigError("annotated_fraction must lie in (0, 1]")
        if self.input != SYNTH_INPUT and not Path(self.input).is_dir():
            raise ConfigError(f"input directory {self.input} does not exist")
        if self.gt_dir and not Path(self.gt_dir).is_dir():
            raise ConfigError(f"gt_dir {self.gt_dir} does not exist")
        if self.annotated != "auto":
            try:
                [int(t) for t in self.annotated.split(",")]
            except ValueError as err:
                raise ConfigError(f"annotated must be 'auto' or integers: {self.annotated!r}") from err
        return self

    @property
    def is_synth(self) -> bool:
        return self.input == SYNTH_INPUT


SECTIONS = {
    "run": RunSettings,
    "synth": SynthConfig,
    "vesselness": VesselnessConfig,
    "prior": PriorConfig,
    "flow": FlowProviderConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
}
SEEDED = ("synth", "stage1", "stage2")


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)
    vesselness: VesselnessConfig = field(default_factory=VesselnessConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    flow: FlowProviderConfig = field(default_factory=FlowProviderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    extra: dict = field(default_factory=dict)  # sections outside the pipeline, kept verbatim

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def output(self) -> Path:
        return Path(self.run.output)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        out = replace(self, run=replace(self.run, seed=seed))
        for name in SEEDED:
            setattr(out, name, replace(getattr(self, name), seed=seed))
        return out

    def snapshot(self) -> dict:
        data = {name: asdict(getattr(self, name)) for name in SECTIONS}
        if self.extra:
            data["extra"] = self.extra
        return data


def _parse_value(text: str, hint, default):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none", "auto"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is list:
        return [_parse_value(part, args[0], None) for part in text.split(",") if part.strip()]
    if hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if hint in (int, float, str):
        return hint(text)
    return type(default)(text)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    obj = cls()
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        try:
            kwargs[key] = _parse_value(text, hints[key], getattr(obj, key))
        except (ValueError, TypeError) as err:
            raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from err
    return replace(obj, **kwargs)


def parse_overrides(pairs) -> dict:
    """``["stage2.lr=1e-4", ...]`` -> ``{"stage2": {"lr": "1e-4"}}``."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        key, value = pair.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Read an INI file, apply ``section.key=value`` overrides and the seed variable."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(values)

    built, extra = {}, {}
    for section, values in raw.items():
        if section in SECTIONS:
            built[section] = _build(SECTIONS[section], values, section)
        else:
            extra[section] = values
    cfg = RunConfig(**built, extra=extra)

    env = os.environ if env is None else env
    seed = cfg.run.seed
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV} must be an integer") from err
    return cfg.with_seed(seed).validate()


def dump_config(cfg: RunConfig, path) -> None:
    """Write every field, so the file documents all defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)
                        if not (name in SEEDED and f.name == "seed")}
    for section, values in cfg.extra.items():
        parser[section] = values
    with open(path, "w") as f:
        parser.write(f)
