"""
Shared fixtures and scenario builders
"""
import numpy as np
import pytest

from config import RunConfig
from geometry import RigidTransform
from imu import ImuNoiseParams, ImuSample
from map_matching import GlobalMap
from scan import FeatureCloud, FeatureLabel, FeaturePoint
from simulator import SimWorld, TrajectoryKind, TrajectorySpec, default_world, truth_at
from state import State


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def noise():
    return ImuNoiseParams(sigma_acc=1e-2, sigma_gyro=1e-3, sigma_acc_bias=1e-4, sigma_gyro_bias=1e-5)


@pytest.fixture
def config():
    return RunConfig()


def truth_state(spec: TrajectorySpec, t: float, acc_bias=(0.0, 0.0, 0.0), gyro_bias=(0.0, 0.0, 0.0)) -> State:
    truth = truth_at(spec, t)
    return State(
        p=truth.pose.translation,
        v=truth.velocity,
        q=truth.pose.rotation,
        acc_bias=acc_bias,
        gyro_bias=gyro_bias,
        t=t,
    )


def yaw_spec(duration=1.0, velocity=(1.0, 0.0, 0.0), yaw_rate=0.5) -> TrajectorySpec:
    """
    Constant velocity with a constant yaw rate: the accelerometer sees gravity
    along the rotation axis, so mid-point integration is exact
    """
    return TrajectorySpec(
        TrajectoryKind.CONSTANT_VELOCITY,
        duration=duration,
        velocity=velocity,
        angular_velocity=(0.0, 0.0, yaw_rate),
    )


def high_dynamics_spec(duration=1.0) -> TrajectorySpec:
    """Peak angular rate about 3.1 rad/s"""
    return TrajectorySpec(
        TrajectoryKind.SINUSOID,
        duration=duration,
        translation_amplitude=(0.5, 0.5, 0.2),
        rotation_amplitude=(0.1, 0.1, 0.5),
    )


def random_samples(rng, n=41, t0=0.0, dt=0.0025, gyro_scale=1.0, acc_scale=2.0) -> list[ImuSample]:
    """Smoothly varying random IMU readings"""
    gyro0, gyro1 = rng.normal(0.0, gyro_scale, 3), rng.normal(0.0, gyro_scale, 3)
    acc0 = np.array([0.0, 0.0, 9.81]) + rng.normal(0.0, acc_scale, 3)
    acc1 = rng.normal(0.0, acc_scale, 3)
    samples = []
    for i in range(n):
        s = i / (n - 1)
        samples.append(ImuSample(t0 + i * dt, gyro0 + s * gyro1, acc0 + np.sin(3.0 * s) * acc1))
    return samples


def random_state(rng, t=0.0, scale=1.0) -> State:
    return State(
        p=rng.normal(0.0, scale, 3),
        v=rng.normal(0.0, scale, 3),
        q=RigidTransform.from_rotation_vector(rng.normal(0.0, 0.5, 3)).rotation,
        acc_bias=rng.normal(0.0, 0.05, 3),
        gyro_bias=rng.normal(0.0, 0.01, 3),
        t=t,
    )


def world_map(world: SimWorld = None, offset=(0.0, 0.0, 0.0), plane_step=0.3, edge_step=0.1) -> GlobalMap:
    """Dense map sampled straight from the world primitives"""
    world = world or default_world()
    offset = np.asarray(offset, dtype=float)
    planars, edges = [], []
    for plane in world.planes:
        a, b = [axis for axis in range(3) if plane.lower[axis] != plane.upper[axis]]
        for u in np.arange(plane.lower[a], plane.upper[a] + 1e-9, plane_step):
            for v in np.arange(plane.lower[b], plane.upper[b] + 1e-9, plane_step):
                p = plane.lower.copy()
                p[a], p[b] = u, v
                planars.append(FeaturePoint(0.0, p + offset, FeatureLabel.PLANAR))
    for edge in world.edges:
        for s in np.arange(edge.extent[0], edge.extent[1] + 1e-9, edge_step):
            edges.append(FeaturePoint(0.0, edge.anchor + s * edge.direction + offset, FeatureLabel.EDGE))
    return GlobalMap().insert_scan(FeatureCloud(edges, planars))


@pytest.fixture(scope="session")
def room_map():
    return world_map()
