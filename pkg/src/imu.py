"""
IMU sample model, noise parameters and static initialization

Measurement model (body frame, world z up, g_w = (0, 0, +G)):
    â = Rᵀ (a_w + g_w) + b_a + n_a
    ω̂ = ω + b_ω + n_ω
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from geometry import UnitQuaternion, exp_map

logger = logging.getLogger(__name__)

GRAVITY = 9.81

# Two timestamps closer than this are the same instant
TIME_TOLERANCE = 1e-9

IMU_COLUMNS = ["t", "wx", "wy", "wz", "ax", "ay", "az"]


class InitializationError(ValueError):
    """Static initialization rejected the window"""


class ImuWindowError(ValueError):
    """IMU samples do not form a usable window"""


@dataclass(frozen=True, eq=False)
class ImuSample:
    """One gyroscope + accelerometer reading"""
    t: float
    gyro: np.ndarray  # rad/s
    acc: np.ndarray  # m/s²

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "acc", np.asarray(self.acc, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities"""
    sigma_acc: float  # m/s²/√Hz
    sigma_gyro: float  # rad/s/√Hz
    sigma_acc_bias: float  # m/s³/√Hz
    sigma_gyro_bias: float  # rad/s²/√Hz

    def __post_init__(self):
        for name in ("sigma_acc", "sigma_gyro", "sigma_acc_bias", "sigma_gyro_bias"):
            value = getattr(self, name)
            if not value > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value}")

    @classmethod
    def from_config(cls, imu_config) -> "ImuNoiseParams":
        return cls(
            sigma_acc=imu_config.sigma_acc,
            sigma_gyro=imu_config.sigma_gyro,
            sigma_acc_bias=imu_config.sigma_acc_bias,
            sigma_gyro_bias=imu_config.sigma_gyro_bias,
        )


@dataclass(frozen=True, eq=False)
class ImuState:
    """Biases and the fixed gravity vector"""
    acc_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: gravity_vector(GRAVITY))


def gravity_vector(magnitude: float = GRAVITY) -> np.ndarray:
    return np.array([0.0, 0.0, float(magnitude)])


def window_variances(window: Sequence[ImuSample]) -> tuple[float, float]:
    """
    Returns (gyro variance summed over axes, variance of the accel norm)
    """
    gyro = np.array([s.gyro for s in window])
    acc_norm = np.linalg.norm(np.array([s.acc for s in window]), axis=1)
    return float(np.var(gyro, axis=0).sum()), float(np.var(acc_norm))


def stationarity_check(
    window: Sequence[ImuSample],
    gyro_var_max: float = 1e-2,
    accel_var_max: float = 1e-1,
) -> bool:
    """True iff both window variances are below their thresholds"""
    if not window:
        raise ImuWindowError("Stationarity check needs a nonempty window")
    gyro_var, accel_var = window_variances(window)
    return gyro_var < gyro_var_max and accel_var < accel_var_max


def static_initialize(
    window: Sequence[ImuSample],
    min_duration: float = 10.0,
    gravity: float = GRAVITY,
    gyro_var_max: float = 1e-2,
    accel_var_max: float = 1e-1,
) -> tuple[ImuState, UnitQuaternion]:
    """
    Estimate gyro bias and roll/pitch from a window recorded at rest

    Yaw is unobservable and set to zero. The accelerometer bias starts at
    zero; the optimizer refines it later.

    Returns:
        (ImuState, initial body-to-world orientation)
    """
    if len(window) < 2:
        raise InitializationError(f"Need at least 2 samples, got {len(window)}")

    duration = window[-1].t - window[0].t
    if duration < min_duration - TIME_TOLERANCE:
        raise InitializationError(
            f"Static window spans {duration:.3f} s, need {min_duration:.3f} s"
        )

    gyro_var, accel_var = window_variances(window)
    if not (gyro_var < gyro_var_max and accel_var < accel_var_max):
        raise InitializationError(
            f"Device not stationary: gyro variance {gyro_var:.3e} "
            f"(max {gyro_var_max:.3e}), accel-norm variance {accel_var:.3e} "
            f"(max {accel_var_max:.3e})"
        )

    gyro_bias = np.mean([s.gyro for s in window], axis=0)
    mean_acc = np.mean([s.acc for s in window], axis=0)

    roll = math.atan2(mean_acc[1], mean_acc[2])
    pitch = math.atan2(-mean_acc[0], math.hypot(mean_acc[1], mean_acc[2]))
    orientation = exp_map([0.0, pitch, 0.0]) * exp_map([roll, 0.0, 0.0])

    logger.info(
        f"Static init over {len(window)} samples: gyro bias "
        f"{np.array2string(gyro_bias, precision=5)}, roll {math.degrees(roll):.3f} deg, "
        f"pitch {math.degrees(pitch):.3f} deg"
    )

    state = ImuState(
        acc_bias=np.zeros(3),
        gyro_bias=gyro_bias,
        gravity=gravity_vector(gravity),
    )
    return state, orientation


def interpolate_sample(older: ImuSample, newer: ImuSample, t: float) -> ImuSample:
    """Linear interpolation of both channels at time t"""
    span = newer.t - older.t
    if span <= 0.0:
        raise ImuWindowError(f"Cannot interpolate across non-increasing times {older.t}, {newer.t}")
    w = (t - older.t) / span
    return ImuSample(
        t=t,
        gyro=(1.0 - w) * older.gyro + w * newer.gyro,
        acc=(1.0 - w) * older.acc + w * newer.acc,
    )


def slice_window(
    samples: Sequence[ImuSample],
    t_start: float,
    t_end: float,
) -> list[ImuSample]:
    """
    Samples covering exactly [t_start, t_end]

    When no sample falls on a boundary, one is interpolated there.
    """
    if t_end <= t_start:
        raise ImuWindowError(f"Empty window [{t_start}, {t_end}]")
    if not samples:
        raise ImuWindowError("No IMU samples")
    if samples[0].t > t_start + TIME_TOLERANCE or samples[-1].t < t_end - TIME_TOLERANCE:
        raise ImuWindowError(
            f"IMU data [{samples[0].t}, {samples[-1].t}] does not cover "
            f"[{t_start}, {t_end}]"
        )

    times = np.array([s.t for s in samples])
    first = int(np.searchsorted(times, t_start - TIME_TOLERANCE, side="left"))
    last = int(np.searchsorted(times, t_end + TIME_TOLERANCE, side="right"))
    inner = list(samples[first:last])

    if not inner or inner[0].t > t_start + TIME_TOLERANCE:
        inner.insert(0, interpolate_sample(samples[first - 1], samples[first], t_start))
    if inner[-1].t < t_end - TIME_TOLERANCE:
        inner.append(interpolate_sample(samples[last - 1], samples[last], t_end))
    return inner


def read_imu_csv(path) -> list[ImuSample]:
    """Load samples from `t,wx,wy,wz,ax,ay,az`"""
    df = pd.read_csv(path)
    missing = [c for c in IMU_COLUMNS if c not in df.columns]
    if missing:
        raise ImuWindowError(f"{path}: missing IMU columns {missing}")
    data = df[IMU_COLUMNS].to_numpy(dtype=float)
    if len(data) > 1 and np.any(np.diff(data[:, 0]) <= 0.0):
        raise ImuWindowError(f"{path}: IMU timestamps are not strictly increasing")
    logger.debug(f"Read {len(data)} IMU samples from {path}")
    return [ImuSample(row[0], row[1:4], row[4:7]) for row in data]


def write_imu_csv(samples: Sequence[ImuSample], path, float_format: Optional[str] = "%.12g") -> Path:
    rows = [[s.t, *s.gyro, *s.acc] for s in samples]
    df = pd.DataFrame(rows, columns=IMU_COLUMNS)
    path = Path(path)
    df.to_csv(path, index=False, float_format=float_format)
    return path
