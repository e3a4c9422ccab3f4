"""Run configuration: one JSON document with a version field and one section
per subcommand. Unknown keys are rejected; command-line flags override
file values.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from .evaluation import CLUTTER_THRESHOLD, DESK_LENGTHS
from .pipeline import OdometryConfig, TrainConfig
from .simulator import RadarConfig, SimulationConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class EvalConfig:
    segment_lengths: tuple = DESK_LENGTHS
    kitti_lengths: bool = False
    clutter_threshold: float = CLUTTER_THRESHOLD

    def __post_init__(self):
        self.segment_lengths = tuple(float(x) for x in self.segment_lengths)
        if not self.segment_lengths or min(self.segment_lengths) <= 0:
            raise ValueError("segment_lengths must be positive")
        if not self.clutter_threshold > 0:
            raise ValueError("clutter_threshold must be positive")


@dataclass
class MapConfig:
    voxel: float = 0.0  # 0 disables voxel deduplication

    def __post_init__(self):
        if self.voxel < 0:
            raise ValueError("voxel must be non-negative")


SECTIONS = {
    "simulate": SimulationConfig,
    "radar": RadarConfig,
    "train": TrainConfig,
    "odometry": OdometryConfig,
    "map": MapConfig,
    "eval": EvalConfig,
}

TOP_LEVEL = {"version": CONFIG_VERSION, "seed": 0, "threads": 1}

# keys whose defaults are published values rather than choices made here
PUBLISHED = {
    "train.epochs", "train.lr", "train.lambda1", "train.lambda2", "train.kappa", "train.rho",
    "train.threshold_ratio", "train.desc_dim", "eval.clutter_threshold", "radar.H", "radar.W",
}


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    sections: dict = field(default_factory=dict)  # name -> dict of explicit values

    def build(self, name: str, **extra):
        """Instantiate a section, surfacing validation failures as ConfigError."""
        cls = SECTIONS[name]
        values = dict(self.sections.get(name, {}))
        values.update(extra)
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None

    def get(self, name: str, key: str, default=None):
        return self.sections.get(name, {}).get(key, default)


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.name.startswith("_"):
            continue
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = None
    return out


def describe_keys() -> str:
    """One line per configuration key with its default and provenance."""
    lines = ["configuration keys (JSON document, 'version': %d):" % CONFIG_VERSION]
    for key, val in TOP_LEVEL.items():
        lines.append(f"  {key} = {val!r}")
    for name, cls in SECTIONS.items():
        for k, v in _defaults(cls).items():
            if name == "radar" and k == "eta":
                v = "uniform over ±fov_deg"
            tag = " [published]" if f"{name}.{k}" in PUBLISHED else ""
            lines.append(f"  {name}.{k} = {v!r}{tag}" if not isinstance(v, str) else f"  {name}.{k} = {v}{tag}")
    return "\n".join(lines)


def parse_document(doc: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{source}: unsupported config version {version!r} (expected {CONFIG_VERSION})")
    cfg = RunConfig()
    for key, value in doc.items():
        if key == "version":
            continue
        if key in ("seed", "threads"):
            if not isinstance(value, int) or isinstance(value, bool) or value < (1 if key == "threads" else 0):
                raise ConfigError(f"{source}: {key} must be a {'positive' if key == 'threads' else 'non-negative'} integer")
            setattr(cfg, key, value)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{source}: section {key!r} must be an object")
        allowed = set(_defaults(SECTIONS[key]))
        for k in value:
            if k not in allowed:
                raise ConfigError(f"{source}: unknown key {key}.{k}")
        cfg.sections[key] = dict(value)
    for name in cfg.sections:
        cfg.build(name)  # validate eagerly
    return cfg


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"{p}: config file not found") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_document(doc, str(p))


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if key in ("seed", "threads"):
        doc = {key: value}
        setattr(cfg, key, getattr(parse_document(doc, "override"), key))
        return
    if "." not in key:
        raise ConfigError(f"unknown key {key!r}")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown key {key!r}")
    if name not in _defaults(SECTIONS[section]):
        raise ConfigError(f"unknown key {key!r}")
    cfg.sections.setdefault(section, {})[name] = value
    cfg.build(section)


def set_value(cfg: RunConfig, section: str, key: str, value) -> None:
    """Flag override; ``None`` leaves the configured value alone."""
    if value is None:
        return
    cfg.sections.setdefault(section, {})[key] = value
    cfg.build(section)
