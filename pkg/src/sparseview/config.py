"""Run configuration and its plain-text ``key = value`` file format.

Keys are dotted ``section.field`` paths, one per line; ``#`` starts a
comment. Vectors are comma separated. The scene is described by indexed
primitives::

    seed = 3
    stage1.steps = 500
    scene.0.type = sphere
    scene.0.center = 0, 0, 0
    scene.0.radius = 0.5
    scene.light_dir = 0.3, 0.8, 0.5

Anything not given keeps its dataclass default. :func:`dump_config` writes
the fully resolved configuration back in the same format.
"""

from __future__ import annotations

import math
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace

from .consensus import FusionConfig
from .enhancer import EnhancerConfig
from .recon import LossWeights, Stage1Config, Stage2Config
from .scene import PRIMITIVES, SceneSpec

MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViewConfig:
    n_views: int = 6
    n_heldout: int = 4
    radius: float = 3.0
    elevation: float = 0.35  # radians
    fov_deg: float = 30.0
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if self.n_views < 1 or self.n_heldout < 0:
            raise ValueError("need n_views >= 1 and n_heldout >= 0")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must be in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if not -math.pi / 2 < self.elevation < math.pi / 2:
            raise ValueError("elevation must be in (-pi/2, pi/2)")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_start < 1 or not 0 < self.beta_end < 1:
            raise ValueError("need T >= 1 and betas in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    chamfer_samples: int = 20000
    ablation_seeds: int = 3

    def __post_init__(self):
        if self.chamfer_samples < 1 or self.ablation_seeds < 1:
            raise ValueError("chamfer_samples and ablation_seeds must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    scene: SceneSpec = field(default_factory=SceneSpec)
    views: ViewConfig = ViewConfig()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    weights: LossWeights = LossWeights()
    fusion: FusionConfig = FusionConfig()
    enhancer: EnhancerConfig = EnhancerConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        if not isinstance(self.seed, int) or not 0 <= self.seed <= MAX_SEED:
            raise ConfigError(f"seed: must be an integer in [0, 2^64), got {self.seed!r}")


SECTIONS = {
    "views": ViewConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "weights": LossWeights,
    "fusion": FusionConfig,
    "enhancer": EnhancerConfig,
    "schedule": ScheduleConfig,
    "eval": EvalConfig,
}

_PRIM_FIELDS = {"sphere": ("center", "radius", "albedo"),
                "box": ("center", "half_extents", "albedo"),
                "torus": ("center", "radii", "albedo")}


def _parse_scalar(text: str, kind, key: str):
    s = text.strip()
    origin = typing.get_origin(kind)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if s.lower() in ("none", ""):
            return None
        return _parse_scalar(s, args[0], key)
    try:
        if kind is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if kind is int:
            return int(s, 0)
        if kind is float:
            v = float(s)
            if not math.isfinite(v):
                raise ValueError(f"not finite: {s!r}")
            return v
        if kind is str:
            return s
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {kind!r}")


def _parse_vector(text: str, key: str, n: int | None = 3) -> tuple:
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(vals)}")
    return vals


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs[key] = value
    return pairs


def _build_section(cls, base, items: dict[str, str], prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    updates = {}
    for name, value in items.items():
        key = f"{prefix}.{name}"
        if name not in names:
            raise ConfigError(f"{key}: unknown field")
        updates[name] = _parse_scalar(value, hints[name], key)
    try:
        return replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def _build_scene(base: SceneSpec, items: dict[str, str]) -> SceneSpec:
    light, ambient = base.light_dir, base.ambient
    prims: dict[int, dict[str, str]] = {}
    for name, value in items.items():
        key = f"scene.{name}"
        head, _, rest = name.partition(".")
        if head == "light_dir":
            light = _parse_vector(value, key)
        elif head == "ambient":
            ambient = _parse_scalar(value, float, key)
        elif head.isdigit() and rest:
            prims.setdefault(int(head), {})[rest] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    primitives = base.primitives
    if prims:
        if sorted(prims) != list(range(len(prims))):
            raise ConfigError(f"scene: primitive indices must be 0..{len(prims) - 1}")
        primitives = tuple(_build_primitive(i, prims[i]) for i in range(len(prims)))
    try:
        return SceneSpec(primitives, light, ambient)
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from None


def _build_primitive(i: int, items: dict[str, str]):
    prefix = f"scene.{i}"
    kind = items.get("type")
    if kind is None:
        raise ConfigError(f"{prefix}.type: missing primitive type")
    if kind not in PRIMITIVES:
        raise ConfigError(f"{prefix}.type: unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}")
    kwargs = {}
    for name, value in items.items():
        if name == "type":
            continue
        if name not in _PRIM_FIELDS[kind]:
            raise ConfigError(f"{prefix}.{name}: unknown field for {kind}")
        if name == "radius":
            kwargs[name] = _parse_scalar(value, float, f"{prefix}.{name}")
        else:
            kwargs[name] = _parse_vector(value, f"{prefix}.{name}", 2 if name == "radii" else 3)
    return PRIMITIVES[kind](**kwargs)


def config_from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    grouped: dict[str, dict[str, str]] = {}
    top = {}
    for key, value in pairs.items():
        section, dot, rest = key.partition(".")
        if dot:
            grouped.setdefault(section, {})[rest] = value
        else:
            top[key] = value
    updates = {}
    for key, value in top.items():
        if key == "seed":
            updates["seed"] = _parse_scalar(value, int, key)
        elif key == "out":
            updates["out"] = value
        else:
            raise ConfigError(f"{key}: unknown key")
    for section, items in grouped.items():
        if section == "scene":
            updates["scene"] = _build_scene(cfg.scene, items)
        elif section in SECTIONS:
            updates[section] = _build_section(SECTIONS[section], getattr(cfg, section), items, section)
        else:
            raise ConfigError(f"{section}: unknown section")
    try:
        return replace(cfg, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    return config_from_pairs(parse_pairs(text, source), base)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(os.fspath(path)) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse_config(text, os.fspath(path), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(float(x)) for x in v)
    if v is None:
        return "none"
    return str(v)


def config_pairs(cfg: RunConfig) -> list[tuple[str, str]]:
    """Fully resolved ``(key, value)`` pairs in a stable order."""
    out = [("seed", str(cfg.seed)), ("out", cfg.out)]
    for i, prim in enumerate(cfg.scene.primitives):
        kind = next(k for k, cls in PRIMITIVES.items() if isinstance(prim, cls))
        out.append((f"scene.{i}.type", kind))
        for name in _PRIM_FIELDS[kind]:
            v = getattr(prim, name)
            out.append((f"scene.{i}.{name}", _fmt(float(v) if name == "radius" else tuple(v))))
    out.append(("scene.light_dir", _fmt(tuple(cfg.scene.light_dir))))
    out.append(("scene.ambient", _fmt(float(cfg.scene.ambient))))
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            out.append((f"{section}.{f.name}", _fmt(getattr(obj, f.name))))
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_pairs(cfg))
