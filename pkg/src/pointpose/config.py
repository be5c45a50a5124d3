"""Run configuration: every tunable named by the toolkit, with documented
defaults, YAML overrides and a lossless dump/load round trip."""

from __future__ import annotations

import dataclasses
import os
import warnings
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError


@dataclass
class SamplingConfig:
    keypoints: int = 4096          # K, keypoints per scene
    group_size: int = 32           # G, members per neighborhood
    group_radius: float = 0.03     # m
    seed_rule: str = "lowest_index"


@dataclass
class NetworkConfig:
    hidden_point: int = 32         # per-point MLP width
    hidden_feature: int = 128      # pooled feature width
    hidden_head: int = 64          # head MLP width
    num_classes: int = 2           # background + one foreground class


@dataclass
class LossConfig:
    seg_weight: float = 1.0
    reg_weight: float = 1.0
    conf_weight: float = 1.0
    smooth_l1_beta: float = 1.0    # transition point, meters-scaled units


@dataclass
class ConfidenceConfig:
    alpha: float = 2.0             # sharpness
    cutoff: float = 0.06           # d_th, meters


@dataclass
class TrainConfig:
    epochs: int = 200
    phase1_epochs: int = 0         # segmentation-only warmup epochs
    learning_rate: float = 1e-3
    momentum: float = 0.0
    batch_scenes: int = 1
    seed: int = 0


@dataclass
class IcpSettings:
    max_iterations: int = 50
    convergence_eps: float = 1e-6  # m, minimum RMS improvement
    max_correspondence_dist: float = 0.02  # m
    model_points: int = 2048       # mesh vertices kept for refinement


@dataclass
class DecodeSettings:
    tau: float = 0.8               # confidence threshold
    voxel_edge: float | None = None       # m, None = model diameter / 2
    nms_center_dist: float | None = None  # m, None = 0.5 * model diameter
    icp: IcpSettings = field(default_factory=IcpSettings)


@dataclass
class CameraConfig:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    depth_noise_sigma: float = 0.001  # m, along-ray
    z_near: float = 0.2
    z_far: float = 4.0


@dataclass
class SceneConfig:
    workspace_x: list = field(default_factory=lambda: [-0.25, 0.25])
    workspace_y: list = field(default_factory=lambda: [-0.25, 0.25])
    plane_extent: float = 1.6      # side length of the support plane, m
    objects_per_scene: int = 1
    clutter_count: int = 3
    clutter_size: list = field(default_factory=lambda: [0.02, 0.06])
    orbit_radius: list = field(default_factory=lambda: [0.8, 1.1])
    orbit_elevation_deg: list = field(default_factory=lambda: [30.0, 55.0])
    layout_retries: int = 1000


@dataclass
class EvalSettings:
    threshold_fraction: float = 0.10
    sweep_fractions: list = field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20, 0.30, 0.50])
    symmetric_classes: list = field(default_factory=list)  # class ids scored with ADD-S


@dataclass
class RunConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    camera: CameraConfig = field(default_factory=CameraConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)


def _coerce(value, ftype, path):
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ftype is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported config field type {ftype!r}")


def _apply(obj, overrides: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in fields:
            warnings.warn(f"unknown config key {here!r} ignored", stacklevel=2)
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a mapping")
            _apply(current, value, here)
        elif current is None or (value is None and "None" in str(fields[key].type)):
            # optional floats (voxel_edge, nms_center_dist)
            if value is not None and (isinstance(value, bool) or
                                      not isinstance(value, (int, float))):
                raise ConfigError(f"{here}: expected a number or null, got {value!r}")
            setattr(obj, key, None if value is None else float(value))
        else:
            setattr(obj, key, _coerce(value, type(current), here))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional YAML file and explicit
    overrides (applied last). Unknown keys warn, type mismatches raise
    ConfigError naming the key path, missing keys keep their defaults."""
    cfg = RunConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _apply(cfg, doc, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize the full effective configuration as YAML."""
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)


def config_digest(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
