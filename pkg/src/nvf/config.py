"""Run configuration: typed sections read from INI-style text.

Every key has a default. Unknown sections or keys are rejected with the
line they appear on. ``reference()`` renders the full documented key list.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from dataclasses import field as _dc_field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError


@dataclass
class SceneConfig:
    generator: str = "two-room"
    resolution: int = 16  # voxels per world unit
    seed: int = -1  # -1 derives the scene seed from the run seed
    n_blocks: int = 3
    occupied_density: float = 200.0
    door_width: float = 0.3
    door_height: float = 0.7
    background: tuple = (0.5, 0.5, 0.5)


@dataclass
class CameraConfig:
    width: int = 32
    height: int = 32
    fov_deg: float = 70.0
    gt_samples: int = 96


@dataclass
class FieldConfig:
    resolution: int = 16  # voxels per world unit
    samples_per_ray: int = 40
    stratified: bool = True
    backbone_iterations: int = 300
    batch_rays: int = 1024
    lr_density: float = 1.0
    lr_color: float = 0.1
    density_init: float = 0.0  # raw value before softplus
    variance_init: float = 1e-3  # activated variance of untrained voxels
    variance_floor: float = 1e-6
    variance_iterations: int = 500
    variance_lr: float = 0.1
    visibility_iterations: int = 500
    visibility_lr: float = 0.1
    visibility_batch: int = 4096
    visibility_pool: int = 16384
    visibility_samples: int = 48
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999


@dataclass
class PriorConfig:
    mu0: tuple = (0.5, 0.5, 0.5)
    q0: tuple = (1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0)
    sigma0: float = -1.0  # -1 sets 1 - exp(-sigma0 * mean spacing) = 0.5
    beta: float = 0.5


@dataclass
class CorrelationSection:
    k: float = 0.25
    correlated: bool = True


@dataclass
class PlannerConfig:
    method: str = "nvf"
    n_candidates: int = 64
    horizon: int = 20
    initial_views: int = 9
    image_width: int = 32
    image_height: int = 32
    samples_per_ray: int = 40
    path_check: bool = True
    collision_alpha: float = 0.1
    look_at_jitter: float = 0.5
    max_pitch_deg: float = 30.0
    no_var_variance: float = 1e-4
    refine: bool = False
    refine_k: int = 3
    refine_steps: int = 10
    refine_lr: float = 0.01
    pixel_subset: int = 256


@dataclass
class EvalConfig:
    n_test_poses: int = 8
    image_width: int = 64
    image_height: int = 64
    cr_ratio: float = -1.0  # -1: 0.1 for interior scenes, 0.01 for objects (times diameter)
    coverage_transmittance: float = 0.5
    surface_density: float = 1.0
    every_step: bool = True
    recon_min_weight: float = 0.5


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1


SECTIONS = {
    "scene": SceneConfig,
    "camera": CameraConfig,
    "field": FieldConfig,
    "priors": PriorConfig,
    "correlation": CorrelationSection,
    "planner": PlannerConfig,
    "eval": EvalConfig,
    "run": RunSection,
}


@dataclass
class RunConfig:
    scene: SceneConfig = _dc_field(default_factory=SceneConfig)
    camera: CameraConfig = _dc_field(default_factory=CameraConfig)
    field: FieldConfig = _dc_field(default_factory=FieldConfig)
    priors: PriorConfig = _dc_field(default_factory=PriorConfig)
    correlation: CorrelationSection = _dc_field(default_factory=CorrelationSection)
    planner: PlannerConfig = _dc_field(default_factory=PlannerConfig)
    eval: EvalConfig = _dc_field(default_factory=EvalConfig)
    run: RunSection = _dc_field(default_factory=RunSection)

    def replace(self, **sections) -> RunConfig:
        """Copy with per-section overrides, e.g. ``replace(planner={"method": "wd"})``."""
        out = dataclasses.replace(self)
        for name, overrides in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            current = getattr(self, name)
            bad = set(overrides) - {f.name for f in fields(current)}
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            setattr(out, name, dataclasses.replace(current, **overrides))
        return out

    def hash(self) -> str:
        """Digest of every setting that influences results."""
        text = dumps(self, include_run_io=False)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(float(v)) for v in value)
    return str(value)


def _parse(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError("value must be finite")
        return val
    if kind is tuple:
        return tuple(float(part) for part in raw.split(","))
    return raw


def dumps(cfg: RunConfig, include_run_io: bool = True) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            if not include_run_io and name == "run" and f.name in ("out_dir", "threads"):
                continue
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if key is None and current == section:
                return lineno
        elif current == section and key is not None:
            head = stripped.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if head == key:
                return lineno
    return 0


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, name)}: unknown section [{name}]")
        section = getattr(cfg, name)
        hints = get_type_hints(type(section))
        known = {f.name for f in fields(section)}
        values = {}
        for key, raw in parser.items(name):
            line = _line_of(text, name, key)
            if key not in known:
                raise ConfigError(f"{source}:{line}: unknown key {name}.{key}")
            kind = hints[key]
            kind = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(kind, kind)
            try:
                values[key] = _parse(raw, kind)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {name}.{key}: {exc}") from exc
        setattr(cfg, name, dataclasses.replace(section, **values))
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return loads(text, source=str(path))


def validate(cfg: RunConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.scene.resolution >= 2, "scene.resolution must be >= 2")
    need(len(cfg.scene.background) == 3, "scene.background needs 3 values")
    need(cfg.camera.width > 0 and cfg.camera.height > 0, "camera size must be positive")
    need(0.0 < cfg.camera.fov_deg < 180.0, "camera.fov_deg must lie in (0, 180)")
    need(cfg.camera.gt_samples >= 2, "camera.gt_samples must be >= 2")
    need(cfg.field.resolution >= 2, "field.resolution must be >= 2")
    need(cfg.field.samples_per_ray >= 2, "field.samples_per_ray must be >= 2")
    need(cfg.field.variance_floor > 0, "field.variance_floor must be positive")
    need(cfg.field.variance_init > 0, "field.variance_init must be positive")
    need(len(cfg.priors.mu0) == 3 and len(cfg.priors.q0) == 3, "priors.mu0 and priors.q0 need 3 values")
    need(all(q > 0 for q in cfg.priors.q0), "priors.q0 must be positive")
    need(0.0 <= cfg.priors.beta <= 1.0, "priors.beta must lie in [0, 1]")
    need(cfg.correlation.k > 0, "correlation.k must be positive")
    need(cfg.planner.n_candidates >= 1, "planner.n_candidates must be >= 1")
    need(cfg.planner.horizon >= 0, "planner.horizon must be >= 0")
    need(cfg.planner.initial_views >= 1, "planner.initial_views must be >= 1")
    need(0.0 < cfg.planner.collision_alpha < 1.0, "planner.collision_alpha must lie in (0, 1)")
    need(cfg.planner.refine_k >= 1 and cfg.planner.refine_steps >= 0, "bad refinement settings")
    need(0.0 < cfg.eval.coverage_transmittance < 1.0, "eval.coverage_transmittance must lie in (0, 1)")


def reference() -> str:
    """Annotated listing of every section and key with its default."""
    out = ["# Configuration reference: every key with its default value.", ""]
    out.append(dumps(RunConfig()))
    return "\n".join(out)
