"""Pose type shared by the perception, simulation, and metrics layers."""

from __future__ import annotations

import math
from dataclasses import dataclass


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class Pose:
    """Position in meters plus yaw in radians.

    Used both for world poses (phi = absolute yaw) and for relative poses
    (phi = relative yaw of the target w.r.t. the observer).
    """

    x: float
    y: float
    z: float
    phi: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "phi"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"non-finite pose component {name}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.phi)


def relative_pose(observer: Pose, target: Pose) -> Pose:
    """Target pose expressed in the observer's body frame (x forward, y left, z up)."""
    dx = target.x - observer.x
    dy = target.y - observer.y
    dz = target.z - observer.z
    c = math.cos(observer.phi)
    s = math.sin(observer.phi)
    return Pose(
        x=c * dx + s * dy,
        y=-s * dx + c * dy,
        z=dz,
        phi=wrap_angle(target.phi - observer.phi),
    )
