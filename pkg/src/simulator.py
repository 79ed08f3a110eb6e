"""
Synthetic ground truth for the odometry: analytic trajectories, IMU
measurements and motion-distorted LiDAR scans of a box-room world

Every point of a synthetic scan is taken at the true pose of its own
timestamp, which is exactly the distortion the estimator has to undo.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from config import RunConfig, SimConfig
from evaluation import Trajectory, write_trajectory
from geometry import RigidTransform, exp_map, right_jacobian
from imu import GRAVITY, ImuSample, gravity_vector, write_imu_csv
from scan import FeatureLabel, RawScan, scan_file_name, write_scan_csv, write_scan_index

logger = logging.getLogger(__name__)

_TIME_TOLERANCE = 1e-9
_MAX_SAMPLING_TRIES = 100


class SimulationError(ValueError):
    """Bad simulation request"""


class TrajectoryKind(Enum):
    REST = "rest"
    CONSTANT_VELOCITY = "constant_velocity"
    SINUSOID = "sinusoid"


def _vec(value) -> np.ndarray:
    return np.array(value, dtype=float).reshape(3)


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    """
    Analytic body trajectory

    Motion starts after `rest_duration` seconds at rest and is blended in
    over `ramp` seconds with a quintic smoothstep, so the acceleration is
    continuous. With ramp = 0 it starts at full speed.
      constant_velocity: p = velocity·P(τ), θ = angular_velocity·P(τ)
      sinusoid: p = s(τ)·A sin(2πfτ), θ = s(τ)·A_r sin(2πf_r τ)
    where τ = t − rest_duration and R = Exp(θ).
    """
    kind: TrajectoryKind = TrajectoryKind.REST
    duration: float = 1.0
    rest_duration: float = 0.0
    ramp: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation_frequency: float = 1.0
    rotation_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation_frequency: float = 1.0

    def __post_init__(self):
        for name in ("velocity", "angular_velocity", "translation_amplitude", "rotation_amplitude"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        if not self.duration > 0.0:
            raise SimulationError(f"Trajectory duration must be positive, got {self.duration}")
        if self.rest_duration < 0.0 or self.ramp < 0.0:
            raise SimulationError("rest_duration and ramp must not be negative")
        if self.kind is not TrajectoryKind.REST and self.rest_duration > 0.0 and self.ramp == 0.0:
            raise SimulationError("A rest prefix needs a ramp > 0 to start moving smoothly")


@dataclass(frozen=True, eq=False)
class TruthSample:
    pose: RigidTransform
    velocity: np.ndarray
    acceleration: np.ndarray  # world frame, gravity excluded
    angular_velocity: np.ndarray  # body frame


def _smoothstep(tau: float, ramp: float) -> tuple[float, float, float]:
    """s, ds/dτ, d²s/dτ² of the quintic ramp"""
    if tau < 0.0:
        return 0.0, 0.0, 0.0
    if ramp == 0.0 or tau >= ramp:
        return 1.0, 0.0, 0.0
    x = tau / ramp
    s = 10 * x ** 3 - 15 * x ** 4 + 6 * x ** 5
    ds = 30 * x ** 2 * (1 - x) ** 2 / ramp
    dds = 60 * x * (1 - x) * (1 - 2 * x) / ramp ** 2
    return s, ds, dds


def _ramped_distance(tau: float, ramp: float) -> tuple[float, float, float]:
    """P(τ) = ∫ s, with its first two derivatives"""
    if tau < 0.0:
        return 0.0, 0.0, 0.0
    if ramp == 0.0:
        return tau, 1.0, 0.0
    if tau >= ramp:
        return 0.5 * ramp + (tau - ramp), 1.0, 0.0
    x = tau / ramp
    s, ds, _ = _smoothstep(tau, ramp)
    return ramp * (2.5 * x ** 4 - 3 * x ** 5 + x ** 6), s, ds


def _ramped_sine(tau: float, ramp: float, amplitude: np.ndarray, frequency: float):
    s, ds, dds = _smoothstep(tau, ramp)
    w = 2 * math.pi * frequency
    base = amplitude * math.sin(w * tau)
    d_base = amplitude * w * math.cos(w * tau)
    dd_base = -amplitude * w * w * math.sin(w * tau)
    return s * base, ds * base + s * d_base, dds * base + 2 * ds * d_base + s * dd_base


def truth_at(spec: TrajectorySpec, t: float) -> TruthSample:
    """Exact pose and derivatives at time t"""
    if t < -_TIME_TOLERANCE or t > spec.duration + _TIME_TOLERANCE:
        raise SimulationError(f"t = {t} outside trajectory [0, {spec.duration}]")
    tau = t - spec.rest_duration

    if spec.kind is TrajectoryKind.CONSTANT_VELOCITY:
        dist, speed, accel = _ramped_distance(tau, spec.ramp)
        p, v, a = spec.velocity * dist, spec.velocity * speed, spec.velocity * accel
        theta, theta_dot = spec.angular_velocity * dist, spec.angular_velocity * speed
    elif spec.kind is TrajectoryKind.SINUSOID:
        p, v, a = _ramped_sine(tau, spec.ramp, spec.translation_amplitude, spec.translation_frequency)
        theta, theta_dot, _ = _ramped_sine(tau, spec.ramp, spec.rotation_amplitude, spec.rotation_frequency)
    else:
        p = v = a = theta = theta_dot = np.zeros(3)

    return TruthSample(
        pose=RigidTransform(exp_map(theta), p),
        velocity=np.array(v, dtype=float),
        acceleration=np.array(a, dtype=float),
        angular_velocity=right_jacobian(theta) @ theta_dot,
    )


@dataclass(frozen=True)
class SensorNoise:
    """Like ImuNoiseParams, but zero entries switch a noise source off"""
    sigma_acc: float = 0.0
    sigma_gyro: float = 0.0
    sigma_acc_bias: float = 0.0
    sigma_gyro_bias: float = 0.0


def synthesize_imu(
    spec: TrajectorySpec,
    noise=SensorNoise(),
    bias: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
    rate: float = 400.0,
    seed: int = 0,
    gravity: float = GRAVITY,
) -> list[ImuSample]:
    """
    Sample â = Rᵀ(a_w + g_w) + b_a + n_a and ω̂ = ω + b_ω + n_ω at `rate`

    Discrete white-noise std is σ·√rate; biases random-walk with σ_b·√δt
    per step.
    """
    if rate < 100.0:
        raise SimulationError(f"IMU rate must be at least 100 Hz, got {rate}")
    n = int(math.floor(spec.duration * rate + 1e-9)) + 1
    rng = np.random.default_rng([seed, 0])
    sqrt_rate = math.sqrt(rate)
    acc_noise = rng.standard_normal((n, 3)) * noise.sigma_acc * sqrt_rate
    gyro_noise = rng.standard_normal((n, 3)) * noise.sigma_gyro * sqrt_rate
    acc_walk = rng.standard_normal((n, 3)) * noise.sigma_acc_bias / sqrt_rate
    gyro_walk = rng.standard_normal((n, 3)) * noise.sigma_gyro_bias / sqrt_rate
    acc_walk[0] = 0.0
    gyro_walk[0] = 0.0
    acc_bias = _vec(bias[0]) + np.cumsum(acc_walk, axis=0)
    gyro_bias = _vec(bias[1]) + np.cumsum(gyro_walk, axis=0)

    g_w = gravity_vector(gravity)
    samples = []
    for i in range(n):
        t = i / rate
        truth = truth_at(spec, t)
        rot_t = truth.pose.rotation.matrix().T
        samples.append(ImuSample(
            t=t,
            gyro=truth.angular_velocity + gyro_bias[i] + gyro_noise[i],
            acc=rot_t @ (truth.acceleration + g_w) + acc_bias[i] + acc_noise[i],
        ))
    logger.debug(f"Synthesized {n} IMU samples at {rate:.0f} Hz")
    return samples


@dataclass(frozen=True, eq=False)
class Plane:
    """Points x with normal·x = offset inside the box [lower, upper]"""
    normal: np.ndarray
    offset: float
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True, eq=False)
class Edge:
    """Segment anchor + s·direction for s in extent"""
    direction: np.ndarray
    anchor: np.ndarray
    extent: tuple[float, float]


@dataclass(frozen=True, eq=False)
class SimWorld:
    planes: tuple = ()
    edges: tuple = ()

    def __post_init__(self):
        for plane in self.planes:
            if abs(np.linalg.norm(plane.normal) - 1.0) > 1e-12:
                raise SimulationError("Plane normals must be unit vectors")
        for edge in self.edges:
            if abs(np.linalg.norm(edge.direction) - 1.0) > 1e-12:
                raise SimulationError("Edge directions must be unit vectors")


def default_world(half_size: float = 5.0, edge_offset: float = 3.0) -> SimWorld:
    """Box room of side 2·half_size plus four vertical edges"""
    h = half_size
    planes = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            normal = np.zeros(3)
            normal[axis] = 1.0
            lower, upper = np.full(3, -h), np.full(3, h)
            lower[axis] = upper[axis] = sign * h
            planes.append(Plane(normal, sign * h, lower, upper))
    edges = [
        Edge(np.array([0.0, 0.0, 1.0]), np.array([x, y, 0.0]), (-h, h))
        for x in (-edge_offset, edge_offset)
        for y in (-edge_offset, edge_offset)
    ]
    return SimWorld(tuple(planes), tuple(edges))


def point_to_primitive_distance(world: SimWorld, label: int, index: int, point) -> float:
    """Distance from a point to plane `index` (planar) or edge line `index` (edge)"""
    point = np.asarray(point, dtype=float)
    if label == FeatureLabel.EDGE.value:
        edge = world.edges[index]
        return float(np.linalg.norm(np.cross(point - edge.anchor, edge.direction)))
    plane = world.planes[index]
    return float(abs(plane.normal @ point - plane.offset))


@dataclass(frozen=True, eq=False)
class SyntheticScan:
    """A scan plus the truth it was generated from"""
    scan: RawScan
    world_points: np.ndarray
    primitive_index: np.ndarray


def _sample_world_point(world: SimWorld, rng: np.random.Generator, edge_fraction: float) -> tuple[np.ndarray, int, int]:
    use_edge = world.edges and (not world.planes or rng.random() < edge_fraction)
    if use_edge:
        index = int(rng.integers(len(world.edges)))
        edge = world.edges[index]
        s = rng.uniform(*edge.extent)
        return edge.anchor + s * edge.direction, FeatureLabel.EDGE.value, index
    index = int(rng.integers(len(world.planes)))
    plane = world.planes[index]
    x = rng.uniform(plane.lower, plane.upper)
    x = x - (plane.normal @ x - plane.offset) * plane.normal
    return x, FeatureLabel.PLANAR.value, index


def synthesize_scan(
    world: SimWorld,
    spec: TrajectorySpec,
    t_start: float,
    t_end: float,
    points_per_scan: int = 600,
    noise_sigma: float = 0.0,
    seed=0,
    edge_fraction: float = 0.2,
    extrinsic: Optional[RigidTransform] = None,
    min_range: float = 0.5,
    max_range: float = 100.0,
) -> SyntheticScan:
    """
    A sweep with uniform point times; each point is seen from the true pose
    at its own time

    extrinsic is the LiDAR-to-IMU transform; points are written in the LiDAR
    frame when it is given.
    """
    if not world.planes and not world.edges:
        raise SimulationError("Cannot scan an empty world")
    if not t_end > t_start:
        raise SimulationError(f"Scan end {t_end} must follow start {t_start}")

    rng = np.random.default_rng(seed)
    to_lidar = extrinsic.inverse() if extrinsic is not None else None
    times = np.linspace(t_start, t_end, points_per_scan)
    body_points = np.zeros((points_per_scan, 3))
    world_points = np.zeros((points_per_scan, 3))
    labels = np.zeros(points_per_scan, dtype=int)
    primitives = np.zeros(points_per_scan, dtype=int)

    for i, t in enumerate(times):
        pose_inv = truth_at(spec, t).pose.inverse()
        for _ in range(_MAX_SAMPLING_TRIES):
            x, label, index = _sample_world_point(world, rng, edge_fraction)
            body = pose_inv.apply(x)
            if min_range <= np.linalg.norm(body) <= max_range:
                break
        else:
            raise SimulationError(f"No world point within range [{min_range}, {max_range}] at t={t}")
        body_points[i] = body
        world_points[i] = x
        labels[i] = label
        primitives[i] = index

    points = to_lidar.apply(body_points) if to_lidar is not None else body_points
    if noise_sigma > 0.0:
        points = points + rng.normal(0.0, noise_sigma, points.shape)

    scan = RawScan(times, points, t_start, t_end, labels=labels)
    return SyntheticScan(scan, world_points, primitives)


def trajectory_from_config(sim: SimConfig, rest_duration: float) -> TrajectorySpec:
    """Trajectory of a preset, with a static prefix for initialization"""
    total = rest_duration + sim.duration
    if sim.preset == "rest":
        return TrajectorySpec(TrajectoryKind.REST, duration=total, rest_duration=rest_duration)
    if sim.preset == "constant_velocity":
        return TrajectorySpec(
            TrajectoryKind.CONSTANT_VELOCITY,
            duration=total,
            rest_duration=rest_duration,
            ramp=sim.ramp,
            velocity=sim.velocity,
            angular_velocity=sim.angular_velocity,
        )
    if sim.preset == "high_dynamics":
        return TrajectorySpec(
            TrajectoryKind.SINUSOID,
            duration=total,
            rest_duration=rest_duration,
            ramp=sim.ramp,
            translation_amplitude=sim.translation_amplitude,
            translation_frequency=sim.translation_frequency,
            rotation_amplitude=sim.rotation_amplitude,
            rotation_frequency=sim.rotation_frequency,
        )
    raise SimulationError(f"Unknown simulation preset '{sim.preset}'")


def scan_windows(rest_duration: float, duration: float, scan_rate: float) -> list[tuple[float, float]]:
    """
    (t_start, t_end) of every scan; the first ends when the rest prefix ends
    """
    period = 1.0 / scan_rate
    if rest_duration < period - _TIME_TOLERANCE:
        raise SimulationError(
            f"Rest prefix {rest_duration} s is shorter than one scan period {period} s"
        )
    count = int(round(duration * scan_rate))
    return [(rest_duration + (k - 1) * period, rest_duration + k * period) for k in range(count)]


@dataclass
class DatasetSummary:
    out_dir: Path
    num_imu_samples: int
    num_scans: int
    duration: float
    peak_angular_rate: float
    peak_speed: float


def generate_dataset(config: RunConfig, out_dir, seed: Optional[int] = None) -> DatasetSummary:
    """
    Write imu.csv, scans/scan_<index>.csv, scans/scans.csv and gt_traj.txt
    """
    sim = config.sim
    seed = sim.seed if seed is None else seed
    rest = config.init.static_seconds
    spec = trajectory_from_config(sim, rest)
    world = default_world()
    out_dir = Path(out_dir)
    scan_dir = out_dir / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)

    noise = SensorNoise(sim.acc_noise, sim.gyro_noise, sim.acc_bias_walk, sim.gyro_bias_walk)
    samples = synthesize_imu(spec, noise, (sim.acc_bias, sim.gyro_bias), sim.imu_rate, seed, config.init.gravity)
    write_imu_csv(samples, out_dir / "imu.csv")

    extrinsic = config.scan.extrinsic()
    windows = scan_windows(rest, sim.duration, sim.scan_rate)
    index_rows = []
    gt_times, gt_poses = [], []
    for k, (t_start, t_end) in enumerate(windows):
        synthetic = synthesize_scan(
            world,
            spec,
            t_start,
            t_end,
            points_per_scan=sim.points_per_scan,
            noise_sigma=sim.lidar_noise,
            seed=[seed, 1, k],
            edge_fraction=sim.edge_fraction,
            extrinsic=extrinsic,
            min_range=config.features.min_range,
            max_range=config.features.max_range,
        )
        write_scan_csv(synthetic.scan, scan_dir / scan_file_name(k))
        index_rows.append((k, t_start, t_end))
        gt_times.append(t_end)
        gt_poses.append(truth_at(spec, t_end).pose)

    write_scan_index(index_rows, scan_dir / "scans.csv")
    write_trajectory(Trajectory.from_poses(gt_times, gt_poses), out_dir / "gt_traj.txt")

    rates = [np.linalg.norm(s.gyro) for s in samples]
    speeds = [np.linalg.norm(truth_at(spec, t).velocity) for t in gt_times]
    logger.info(f"Simulated {len(windows)} scans and {len(samples)} IMU samples into {out_dir}")
    return DatasetSummary(
        out_dir=out_dir,
        num_imu_samples=len(samples),
        num_scans=len(windows),
        duration=spec.duration,
        peak_angular_rate=float(max(rates)) if rates else 0.0,
        peak_speed=float(max(speeds)) if speeds else 0.0,
    )
