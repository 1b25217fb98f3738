"""Closed-loop target-following simulation.

A scripted target flies a trajectory; the simulated observer perceives the
relative pose at the perception rate, smooths it with a per-axis constant-
velocity Kalman filter, converts the filtered pose into velocity commands
with a proportional law, and its velocity relaxes toward the command with a
first-order time constant standing in for the inner attitude/rate loops.
Everything is deterministic given the seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .pose import Pose, relative_pose, wrap_angle
from . import vision

AXES = ("x", "y", "z", "phi")


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpiralTrajectory:
    """Target recedes along +x while (y, z) trace circles whose radius
    oscillates between r_min and r_max; the classic evaluation path."""

    duration: float = 60.0
    start_x: float = 0.2
    x_rate: float = 0.03
    r_min: float = 0.15
    r_max: float = 0.6
    radius_period: float = 20.0
    angular_rate: float = 0.8
    ramp_s: float = 2.0  # radius ramp-in so the path starts exactly on-axis

    kind = "spiral"

    def radius(self, t: float) -> float:
        ramp = min(t / self.ramp_s, 1.0) if self.ramp_s > 0 else 1.0
        osc = (1.0 - math.cos(2.0 * math.pi * t / self.radius_period)) / 2.0
        return ramp * (self.r_min + (self.r_max - self.r_min) * osc)

    def target_pose(self, t: float) -> Pose:
        r = self.radius(t)
        th = self.angular_rate * t
        return Pose(
            self.start_x + self.x_rate * t,
            r * math.cos(th),
            r * math.sin(th),
            math.pi,
        )

    def observer_pose(self, t: float) -> Pose:
        return Pose(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FacingCirclesTrajectory:
    """Both drones ride the same horizontal circle, yaws locked on each
    other; radius, relative height, and angular offset are the knobs."""

    duration: float = 30.0
    radius: float = 1.0
    relative_height: float = 0.0
    angular_offset: float = math.pi
    angular_rate: float = 0.4
    center: tuple[float, float, float] = (0.0, 0.0, 1.0)

    kind = "facing_circles"

    def _position(self, t: float, offset: float, dz: float) -> tuple[float, float, float]:
        th = self.angular_rate * t + offset
        cx, cy, cz = self.center
        return (cx + self.radius * math.cos(th), cy + self.radius * math.sin(th), cz + dz)

    def observer_pose(self, t: float) -> Pose:
        ox, oy, oz = self._position(t, 0.0, 0.0)
        tx, ty, _ = self._position(t, self.angular_offset, self.relative_height)
        return Pose(ox, oy, oz, math.atan2(ty - oy, tx - ox))

    def target_pose(self, t: float) -> Pose:
        ox, oy, _ = self._position(t, 0.0, 0.0)
        tx, ty, tz = self._position(t, self.angular_offset, self.relative_height)
        return Pose(tx, ty, tz, math.atan2(oy - ty, ox - tx))


@dataclass(frozen=True)
class VerticalCirclesTrajectory:
    """Static observer; target flies circles in a vertical plane orthogonal
    to the optical axis, at a fixed distance."""

    duration: float = 30.0
    distance: float = 1.0
    radius: float = 0.4
    angular_rate: float = 0.6
    center_yz: tuple[float, float] = (0.0, 0.0)

    kind = "vertical_circles"

    def observer_pose(self, t: float) -> Pose:
        return Pose(0.0, 0.0, 0.0, 0.0)

    def target_pose(self, t: float) -> Pose:
        th = self.angular_rate * t
        return Pose(
            self.distance,
            self.center_yz[0] + self.radius * math.cos(th),
            self.center_yz[1] + self.radius * math.sin(th),
            math.pi,
        )


@dataclass(frozen=True)
class WaypointTrajectory:
    """Piecewise-linear path through timed waypoints (t, x, y, z, phi)."""

    waypoints: tuple[tuple[float, float, float, float, float], ...]

    kind = "waypoints"

    @property
    def duration(self) -> float:
        return self.waypoints[-1][0]

    def observer_pose(self, t: float) -> Pose:
        return Pose(0.0, 0.0, 0.0, 0.0)

    def target_pose(self, t: float) -> Pose:
        pts = self.waypoints
        if t <= pts[0][0]:
            return Pose(*pts[0][1:])
        for (t0, *a), (t1, *b) in zip(pts, pts[1:]):
            if t <= t1:
                f = (t - t0) / (t1 - t0)
                vals = [va + f * (vb - va) for va, vb in zip(a, b)]
                return Pose(*vals)
        return Pose(*pts[-1][1:])


Trajectory = SpiralTrajectory | FacingCirclesTrajectory | VerticalCirclesTrajectory | WaypointTrajectory


def gen_spiral(**kw) -> SpiralTrajectory:
    return SpiralTrajectory(**kw)


def gen_training_patterns(
    radius: float = 1.0,
    relative_height: float = 0.0,
    angular_offset: float = math.pi,
    distance: float = 1.0,
    circle_radius: float = 0.4,
) -> tuple[FacingCirclesTrajectory, VerticalCirclesTrajectory]:
    a = FacingCirclesTrajectory(
        radius=radius, relative_height=relative_height, angular_offset=angular_offset
    )
    b = VerticalCirclesTrajectory(distance=distance, radius=circle_radius)
    return a, b


# ---------------------------------------------------------------------------
# Perception models
# ---------------------------------------------------------------------------


@dataclass
class DroneState:
    """Simulated observer state: position/yaw plus actual and commanded velocity."""

    position: np.ndarray
    yaw: float
    velocity: np.ndarray
    commanded: np.ndarray

    def pose(self) -> Pose:
        return Pose(self.position[0], self.position[1], self.position[2], self.yaw)


def perceive(model, observer: Pose, target: Pose, rng: np.random.Generator) -> Pose | None:
    """Run one perception tick of the given model; None means no detection."""
    return model.measure(observer, target, rng)


class FilterDivergence(ArithmeticError):
    pass


class VolumeExit(RuntimeError):
    def __init__(self, message: str, log: "EpisodeLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class OracleNoise:
    """True relative pose plus zero-mean Gaussian noise per axis."""

    sigma_xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma_phi: float = 0.0

    name = "oracle"

    def measure(self, observer: Pose, target: Pose, rng: np.random.Generator) -> Pose | None:
        rel = relative_pose(observer, target)
        sx, sy, sz = self.sigma_xyz
        return Pose(
            rel.x + (rng.normal(0.0, sx) if sx else 0.0),
            rel.y + (rng.normal(0.0, sy) if sy else 0.0),
            rel.z + (rng.normal(0.0, sz) if sz else 0.0),
            wrap_angle(rel.phi + (rng.normal(0.0, self.sigma_phi) if self.sigma_phi else 0.0)),
        )

    @classmethod
    def for_overall_rmse(cls, rmse: float) -> "OracleNoise":
        """Isotropic noise whose pooled-over-axes RMSE equals the target."""
        return cls(sigma_xyz=(rmse, rmse, rmse), sigma_phi=0.0)


@dataclass(frozen=True)
class BlobPinhole:
    """Render the scene, detect the target blob, invert the pinhole model."""

    cam: vision.CameraIntrinsics = vision.CameraIntrinsics()
    model: vision.TargetModel = vision.TargetModel()
    background: str = "flat"

    name = "blob"

    def measure(self, observer: Pose, target: Pose, rng: np.random.Generator) -> Pose | None:
        frame = vision.render(observer, target, self.cam, background=self.background)
        return vision.estimate_pose_from_blob(frame, self.cam, self.model)


@dataclass(frozen=True)
class CnnPerception:
    """Render, crop to the inference window, run the integer network."""

    qnet: object
    cam: vision.CameraIntrinsics = vision.CameraIntrinsics()

    name = "cnn"

    def measure(self, observer: Pose, target: Pose, rng: np.random.Generator) -> Pose | None:
        from .qnn import QTensor, crop_input, run_int8

        if vision.project(observer, target, self.cam) is None:
            return None
        frame = vision.render(observer, target, self.cam)
        cropped = crop_input(frame)
        out, _ = run_int8(self.qnet, QTensor.from_frame(cropped))
        vec = np.asarray(out).ravel()
        return Pose(float(vec[0]), float(vec[1]), float(vec[2]), float(vec[3]))


# ---------------------------------------------------------------------------
# Kalman filtering (per-axis constant-velocity model)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AxisKalman:
    pos: float
    vel: float
    cov: tuple[float, float, float]  # (P00, P01, P11); symmetric by storage
    q: float
    r: float
    initialized: bool = False

    def predicted(self, dt: float) -> "AxisKalman":
        p00, p01, p11 = self.cov
        pos = self.pos + dt * self.vel
        n00 = p00 + 2 * dt * p01 + dt * dt * p11 + self.q * dt**4 / 4.0
        n01 = p01 + dt * p11 + self.q * dt**3 / 2.0
        n11 = p11 + self.q * dt * dt
        return replace(self, pos=pos, cov=(n00, n01, n11))

    def updated(self, z: float, angular: bool = False) -> "AxisKalman":
        if not self.initialized:
            return replace(self, pos=z, vel=0.0, cov=(self.r, 0.0, 4.0), initialized=True)
        p00, p01, p11 = self.cov
        innovation = wrap_angle(z - self.pos) if angular else z - self.pos
        s = p00 + self.r
        k0 = p00 / s
        k1 = p01 / s
        pos = self.pos + k0 * innovation
        if angular:
            pos = wrap_angle(pos)
        vel = self.vel + k1 * innovation
        # Joseph form keeps the covariance symmetric positive definite
        a00 = 1.0 - k0
        n00 = a00 * a00 * p00 + k0 * k0 * self.r
        n01 = a00 * (p01 - k1 * p00) + k0 * k1 * self.r
        n11 = p11 - 2.0 * k1 * p01 + k1 * k1 * p00 + k1 * k1 * self.r
        if not (n00 > 0.0 and n00 * n11 - n01 * n01 > 0.0):
            raise FilterDivergence("covariance lost positive definiteness")
        return replace(self, pos=pos, vel=vel, cov=(n00, n01, n11))


@dataclass(frozen=True)
class KalmanState:
    axes: tuple[AxisKalman, AxisKalman, AxisKalman, AxisKalman]

    @classmethod
    def initial(
        cls, q: float, r_xyz: tuple[float, float, float], r_phi: float
    ) -> "KalmanState":
        mk = lambda r: AxisKalman(0.0, 0.0, (1.0, 0.0, 1.0), q, max(r, 1e-8))
        return cls((mk(r_xyz[0]), mk(r_xyz[1]), mk(r_xyz[2]), mk(r_phi)))

    @property
    def initialized(self) -> bool:
        return self.axes[0].initialized

    def estimate(self) -> Pose:
        return Pose(self.axes[0].pos, self.axes[1].pos, self.axes[2].pos, self.axes[3].pos)

    def covariance_trace(self) -> float:
        return sum(a.cov[0] + a.cov[2] for a in self.axes)


def kalman_update(
    state: KalmanState, measurement: Pose | None, dt: float
) -> tuple[KalmanState, Pose]:
    """Constant-velocity predict; correct only when a measurement arrived."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    axes = tuple(a.predicted(dt) if a.initialized else a for a in state.axes)
    if measurement is not None:
        z = measurement.as_tuple()
        axes = tuple(a.updated(z[i], angular=(i == 3)) for i, a in enumerate(axes))
    new = KalmanState(axes)
    return new, new.estimate()


# ---------------------------------------------------------------------------
# Controller and episode loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    setpoint: Pose = Pose(0.8, 0.0, 0.0, 0.0)
    gains: tuple[float, float, float] = (10.0, 10.0, 10.0)
    velocity_limit: float = 1.0
    perception_rate_hz: float = 48.0
    physics_dt: float = 1.0 / 240.0
    response_tau: float = 0.3
    hold_decay_tau: float = 1.0
    kalman_q: float = 5.0
    kalman_r_xyz: tuple[float, float, float] | None = None  # None: from the model
    kalman_r_phi: float = 0.05
    observer_yaw: float = 0.0
    volume_xy: float = 4.0
    volume_z: float = 2.5
    transient_s: float = 5.0

    def __post_init__(self) -> None:
        if min(self.gains) < 0:
            raise ValueError("gains must be non-negative")
        if self.perception_rate_hz * self.physics_dt > 1.0 + 1e-9:
            raise ValueError("perception rate exceeds the physics rate")


def velocity_controller(filtered: Pose, cfg: ControllerConfig) -> np.ndarray:
    """Per-axis proportional law on (filtered - setpoint), rotated into the
    world frame by the observer's fixed yaw and clamped to the limits."""
    err = np.array(
        [
            filtered.x - cfg.setpoint.x,
            filtered.y - cfg.setpoint.y,
            filtered.z - cfg.setpoint.z,
        ]
    )
    body = np.array(cfg.gains) * err
    c, s = math.cos(cfg.observer_yaw), math.sin(cfg.observer_yaw)
    world = np.array([c * body[0] - s * body[1], s * body[0] + c * body[1], body[2]])
    return np.clip(world, -cfg.velocity_limit, cfg.velocity_limit)


def default_measurement_noise(perception) -> tuple[tuple[float, float, float], float]:
    if isinstance(perception, OracleNoise):
        sx, sy, sz = perception.sigma_xyz
        std = lambda s: max(s, 1e-3) ** 2
        return (std(sx), std(sy), std(sz)), max(perception.sigma_phi, 1e-2) ** 2
    return (0.02**2, 0.02**2, 0.02**2), 0.1**2


@dataclass
class EpisodeLog:
    seed: int
    physics_dt: float
    perception_rate_hz: float
    setpoint: Pose
    aborted: bool = False
    abort_reason: str = ""
    t: list[float] = field(default_factory=list)
    observer: list[tuple] = field(default_factory=list)
    target: list[tuple] = field(default_factory=list)
    relative: list[tuple] = field(default_factory=list)
    measured: list[tuple] = field(default_factory=list)  # NaNs when absent
    filtered: list[tuple] = field(default_factory=list)
    command: list[tuple] = field(default_factory=list)
    perception_attempts: int = 0
    detections: int = 0

    def tracking_errors(self, after: float = 0.0) -> np.ndarray:
        """(N, 3) relative-pose error vs the setpoint for t >= after."""
        t = np.asarray(self.t)
        rel = np.asarray(self.relative)[:, :3]
        sp = np.array([self.setpoint.x, self.setpoint.y, self.setpoint.z])
        return (rel - sp)[t >= after]

    def measurement_errors(self) -> np.ndarray:
        """(N, 3) raw measurement minus true relative pose, detections only."""
        meas = np.asarray(self.measured)
        rel = np.asarray(self.relative)
        ok = ~np.isnan(meas[:, 0])
        return (meas[ok, :3] - rel[ok, :3])

    def summary(self) -> dict:
        after = 0.0 if not self.t else min(5.0, self.t[-1])
        err = self.tracking_errors(after=after)
        meas_err = self.measurement_errors()
        out = {
            "seed": self.seed,
            "duration_s": self.t[-1] if self.t else 0.0,
            "steps": len(self.t),
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "perception_attempts": self.perception_attempts,
            "detections": self.detections,
            "detection_rate": (
                self.detections / self.perception_attempts if self.perception_attempts else 0.0
            ),
        }
        for i, axis in enumerate(("x", "y", "z")):
            col = err[:, i] if err.size else np.array([0.0])
            out[f"tracking_mae_{axis}"] = float(np.mean(np.abs(col)))
            out[f"tracking_rmse_{axis}"] = float(np.sqrt(np.mean(col**2)))
        if meas_err.size:
            out["measurement_rmse_overall"] = float(np.sqrt(np.mean(meas_err**2)))
        else:
            out["measurement_rmse_overall"] = 0.0
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["t"]
        for prefix in ("obs", "tgt", "rel", "meas", "filt"):
            header += [f"{prefix}_{a}" for a in AXES]
        header += ["cmd_vx", "cmd_vy", "cmd_vz"]
        writer.writerow(header)
        for k in range(len(self.t)):
            row = [repr(self.t[k])]
            for series in (self.observer, self.target, self.relative, self.measured, self.filtered):
                row += [repr(v) for v in series[k]]
            row += [repr(v) for v in self.command[k]]
            writer.writerow(row)
        return buf.getvalue()


def run_episode(
    trajectory: Trajectory,
    perception,
    cfg: ControllerConfig = ControllerConfig(),
    seed: int = 0,
    duration: float | None = None,
) -> EpisodeLog:
    """Fixed-step closed loop; raises VolumeExit (carrying the partial log)
    if the observer leaves the configured flight volume."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = cfg.physics_dt
    total = trajectory.duration if duration is None else duration
    steps = int(round(total / dt))
    stride = int(round(1.0 / (cfg.perception_rate_hz * dt)))
    if stride < 1 or abs(stride * cfg.perception_rate_hz * dt - 1.0) > 1e-9:
        raise ValueError("physics step must subdivide the perception period")

    r_xyz, r_phi = (
        (cfg.kalman_r_xyz, cfg.kalman_r_phi)
        if cfg.kalman_r_xyz is not None
        else default_measurement_noise(perception)
    )
    state = KalmanState.initial(cfg.kalman_q, r_xyz, r_phi)

    log = EpisodeLog(seed, dt, cfg.perception_rate_hz, cfg.setpoint)
    drone = DroneState(np.zeros(3), cfg.observer_yaw, np.zeros(3), np.zeros(3))
    cmd_raw = np.zeros(3)
    filt = Pose(0, 0, 0, 0)
    last_meas = (math.nan,) * 4
    staleness = math.inf
    decay = math.exp(-dt / cfg.response_tau)

    for k in range(steps + 1):
        t = k * dt
        obs_pose = drone.pose()
        tgt_pose = trajectory.target_pose(t)
        rel = relative_pose(obs_pose, tgt_pose)

        if k % stride == 0:
            log.perception_attempts += 1
            meas = perceive(perception, obs_pose, tgt_pose, rng)
            if meas is not None:
                log.detections += 1
                staleness = 0.0
                last_meas = meas.as_tuple()
            else:
                last_meas = (math.nan,) * 4
            state, filt = kalman_update(state, meas, 1.0 / cfg.perception_rate_hz)
            cmd_raw = (
                velocity_controller(filt, cfg) if state.initialized else np.zeros(3)
            )

        hold = math.exp(-staleness / cfg.hold_decay_tau) if math.isfinite(staleness) else 0.0
        drone.commanded = cmd_raw * hold

        log.t.append(t)
        log.observer.append(obs_pose.as_tuple())
        log.target.append(tgt_pose.as_tuple())
        log.relative.append(rel.as_tuple())
        log.measured.append(last_meas)
        log.filtered.append(filt.as_tuple() if state.initialized else (math.nan,) * 4)
        log.command.append(tuple(drone.commanded))

        drone.velocity = drone.commanded + (drone.velocity - drone.commanded) * decay
        drone.position = drone.position + drone.velocity * dt
        staleness += dt

        if (
            abs(drone.position[0]) > cfg.volume_xy
            or abs(drone.position[1]) > cfg.volume_xy
            or abs(drone.position[2]) > cfg.volume_z
        ):
            log.aborted = True
            log.abort_reason = (
                f"observer left the flight volume at t={t:.2f}s: "
                f"({drone.position[0]:.2f}, {drone.position[1]:.2f}, {drone.position[2]:.2f})"
            )
            raise VolumeExit(log.abort_reason, log)
    return log
