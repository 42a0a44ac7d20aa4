"""Run configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` are comments. Every key must name a field of one of
the section dataclasses below; anything else is rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import CameraIntrinsics
from .losses import LossWeights
from .render import RenderSettings


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    # TUM fr1 defaults
    fx: float = 517.3
    fy: float = 516.5
    cx: float = 318.6
    cy: float = 255.3
    width: int = 640
    height: int = 480
    z_near: float = 0.01
    z_far: float = 100.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.z_near, self.z_far)


@dataclass
class DatasetConfig:
    type: str = "tum"  # tum | generic | synthetic
    depth_scale: float = 5000.0
    association_tolerance: float = 0.02
    downscale: int = 1
    stride: int = 1
    max_frames: int = -1


@dataclass
class SyntheticConfig:
    gaussian_count: int = 500
    extent: float = 1.0
    trajectory: str = "orbit"
    frames: int = 50
    width: int = 128
    height: int = 128
    fov_degrees: float = 60.0
    orbit_radius: float = 2.0
    orbit_degrees: float = 120.0
    orbit_bob: float = 0.3
    depth_noise: float = 0.0
    clutter_fraction: float = 0.0
    clutter_clean_every: int = 0
    seed: int = 0


@dataclass
class MappingConfig:
    d_thre: float = 0.5
    theta_thre: float = 50.0
    rotation_mode: str = "geodesic"  # geodesic | euler
    keyframe_every: int = 5
    M_u: int = 100000
    M_c: int = 50000
    M_k: int = 30000
    alpha_n: float = 0.6
    rho: float = 0.01
    grad_percentile: float = 95.0
    scale_max: float = 0.1
    iters_first_kf: int = 100
    iters_kf: int = 100
    new_kf_fraction: float = 0.4
    o_thre: float = 0.1
    opacity_init: float = 0.5
    refine_iters: int = 10000
    lr_means: float = 1e-4
    lr_quats: float = 1e-3
    lr_log_scales: float = 1e-3
    lr_opacity_logits: float = 5e-2
    lr_colors: float = 2.5e-3

    def __post_init__(self):
        for name in ("keyframe_every", "M_u", "M_c", "M_k", "iters_first_kf", "iters_kf"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"mapping.{name} must be > 0")
        if not 0 < self.alpha_n < 1:
            raise ConfigError("mapping.alpha_n must lie in (0, 1)")
        if not 0 < self.new_kf_fraction <= 1:
            raise ConfigError("mapping.new_kf_fraction must lie in (0, 1]")
        if self.rotation_mode not in ("geodesic", "euler"):
            raise ConfigError("mapping.rotation_mode must be geodesic or euler")


@dataclass
class TrackingConfig:
    iters: int = 60
    convergence_eps: float = 1e-6
    inlier_multiplier: float = 50.0
    alpha_exponent: float = 3.0
    lambda_c: float = 0.5
    use_alpha_mask: bool = True
    use_inlier_mask: bool = True
    lr_q: float = 1e-3
    lr_t: float = 2e-3

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigError("tracking.iters must be >= 1")
        if self.inlier_multiplier <= 1:
            raise ConfigError("tracking.inlier_multiplier must be > 1")
        if not 0 <= self.lambda_c <= 1:
            raise ConfigError("tracking.lambda_c must lie in [0, 1]")


@dataclass
class MeshingConfig:
    voxel_size: float = 0.01
    truncation: float = 0.04
    every_n: int = 5
    alpha_min: float = 0.5


@dataclass
class EvalConfig:
    every_n: int = 5


@dataclass
class RunConfig:
    seed: int = 0


@dataclass
class SLAMConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    render: RenderSettings = field(default_factory=RenderSettings)
    meshing: MeshingConfig = field(default_factory=MeshingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def with_overrides(self, overrides: dict[str, str]) -> "SLAMConfig":
        sections = {}
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            sections.setdefault(section, {})[name] = raw
        kwargs = {}
        for f in dataclasses.fields(self):
            current = getattr(self, f.name)
            updates = sections.pop(f.name, {})
            if updates:
                current = _update_section(f.name, current, updates)
            kwargs[f.name] = current
        if sections:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(sections))}")
        return SLAMConfig(**kwargs)

    def items(self):
        """Flat (key, value) pairs for every setting."""
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                yield f"{f.name}.{sf.name}", getattr(section, sf.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _update_section(section: str, current, updates: dict[str, str]):
    hints = typing.get_type_hints(type(current))
    names = {f.name for f in dataclasses.fields(current)}
    values = {}
    for name, raw in updates.items():
        if name not in names:
            raise ConfigError(f"unknown config key {section}.{name}")
        values[name] = raw if not isinstance(raw, str) else _coerce(hints[name], raw, f"{section}.{name}")
    try:
        return dataclasses.replace(current, **values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> SLAMConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return SLAMConfig().with_overrides(values)
