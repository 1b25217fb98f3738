"""Single TOML config file shared by every CLI subcommand.

One section per subsystem; every default in the dataclasses can be
overridden, unknown sections or keys are rejected outright.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .deploy import MemoryConfig
from .pose import Pose
from .sim import ControllerConfig, SpiralTrajectory
from .vision import AugmentationConfig, CameraIntrinsics, TargetModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationSettings:
    duration_s: float = 60.0
    seed: int = 0
    perception: str = "oracle"  # oracle | blob | cnn
    oracle_rmse: float = 0.18
    weights: str = ""
    background: str = "flat"


@dataclass(frozen=True)
class ConfigBundle:
    memory: MemoryConfig = MemoryConfig()
    camera: CameraIntrinsics = CameraIntrinsics()
    target: TargetModel = TargetModel()
    augmentation: AugmentationConfig = AugmentationConfig()
    controller: ControllerConfig = ControllerConfig()
    simulation: SimulationSettings = SimulationSettings()
    spiral: SpiralTrajectory = SpiralTrajectory()


def _build(cls, section: dict, where: str, transforms: dict | None = None):
    transforms = transforms or {}
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    kwargs = {}
    for key, value in section.items():
        name = transforms.get(key, key)
        if name not in fields:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


_AUG_KEYS = {
    "exposure": "exposure_range",
    "gamma": "gamma_range",
    "vignette": "vignette_range",
    "noise_sigma": "noise_sigma_range",
}

_SECTIONS = ("memory", "camera", "target", "augmentation", "controller", "simulation", "spiral")


def load_config(path: str | Path | None) -> ConfigBundle:
    """Parse the TOML file (or return all defaults when path is None)."""
    if path is None:
        return ConfigBundle()
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section [{key}]")

    controller_section = dict(doc.get("controller", {}))
    if "setpoint" in controller_section:
        sp = controller_section["setpoint"]
        if not (isinstance(sp, list) and len(sp) == 3):
            raise ConfigError("[controller] setpoint must be a list of 3 numbers")
        controller_section["setpoint"] = Pose(sp[0], sp[1], sp[2], 0.0)

    return ConfigBundle(
        memory=_build(MemoryConfig, doc.get("memory", {}), "memory"),
        camera=_build(CameraIntrinsics, doc.get("camera", {}), "camera"),
        target=_build(TargetModel, doc.get("target", {}), "target"),
        augmentation=_build(AugmentationConfig, doc.get("augmentation", {}), "augmentation", _AUG_KEYS),
        controller=_build(ControllerConfig, controller_section, "controller"),
        simulation=_build(SimulationSettings, doc.get("simulation", {}), "simulation"),
        spiral=_build(SpiralTrajectory, doc.get("spiral", {}), "spiral"),
    )
