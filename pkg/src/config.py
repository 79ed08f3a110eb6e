"""
Configuration for the LiDAR-inertial odometry

Sources, later ones winning: dataclass defaults, a `section.key = value`
file, environment variables LIO_<SECTION>__<KEY> (a .env file is honored),
then explicit command-line flags applied by the caller.
"""
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from geometry import RigidTransform

ENV_PREFIX = "LIO_"

Vector3 = tuple[float, float, float]

SIM_PRESETS = ("rest", "constant_velocity", "high_dynamics")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry"""


@dataclass
class InitConfig:
    static_seconds: float = 10.0
    gyro_var_max: float = 1e-2
    accel_var_max: float = 1e-1
    gravity: float = 9.81


@dataclass
class ImuConfig:
    sigma_acc: float = 1e-2  # m/s²/√Hz
    sigma_gyro: float = 1e-3  # rad/s/√Hz
    sigma_acc_bias: float = 1e-4
    sigma_gyro_bias: float = 1e-5
    max_gap: float = 0.02  # s
    relinearize_threshold: float = 0.1


@dataclass
class ScanConfig:
    extrinsic_translation: Vector3 = (0.0, 0.0, 0.0)
    extrinsic_rotation: Vector3 = (0.0, 0.0, 0.0)  # rotation vector, rad

    def extrinsic(self) -> RigidTransform:
        """LiDAR-to-IMU transform"""
        return RigidTransform.from_rotation_vector(self.extrinsic_rotation, self.extrinsic_translation)


@dataclass
class FeaturesConfig:
    window: int = 5
    sectors: int = 6
    max_edges: int = 2
    max_planars: int = 4
    edge_threshold: float = 0.05
    planar_threshold: float = 0.01
    min_range: float = 0.5
    max_range: float = 100.0


@dataclass
class MapConfig:
    voxel_edge: float = 0.2
    voxel_planar: float = 0.4
    neighbors: int = 5
    max_dist: float = 1.0
    line_ratio: float = 3.0
    plane_gate: float = 0.1
    insert_degenerate: bool = True


@dataclass
class LidarConfig:
    sigma: float = 0.02  # m
    huber: float = 0.1  # m, 0 disables


@dataclass
class SolverConfig:
    max_inner: int = 10
    outer: int = 3
    lambda_init: float = 1e-4
    min_step: float = 1e-6
    min_rel_decrease: float = 1e-8
    min_correspondences: int = 20
    one_pass: bool = False


@dataclass
class SimConfig:
    preset: str = "high_dynamics"
    duration: float = 5.0
    imu_rate: float = 400.0
    scan_rate: float = 10.0
    points_per_scan: int = 600
    edge_fraction: float = 0.2
    lidar_noise: float = 0.01
    acc_noise: float = 1e-2
    gyro_noise: float = 1e-3
    acc_bias_walk: float = 0.0
    gyro_bias_walk: float = 0.0
    acc_bias: Vector3 = (0.0, 0.0, 0.0)
    gyro_bias: Vector3 = (0.0, 0.0, 0.0)
    seed: int = 0
    ramp: float = 1.0
    velocity: Vector3 = (1.0, 0.0, 0.0)
    angular_velocity: Vector3 = (0.0, 0.0, 0.0)
    translation_amplitude: Vector3 = (0.5, 0.5, 0.2)
    translation_frequency: float = 1.0
    rotation_amplitude: Vector3 = (0.1, 0.1, 0.5)
    rotation_frequency: float = 1.0


@dataclass
class EvalConfig:
    max_time_diff: float = 0.001


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: '{raw}'")


def _parse_vector(raw: str) -> Vector3:
    parts = raw.replace(",", " ").split()
    if len(parts) != 3:
        raise ValueError(f"expected 3 components, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Every tunable, grouped by section"""
    init: InitConfig = field(default_factory=InitConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    map: MapConfig = field(default_factory=MapConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def sections(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw: str) -> None:
        """Set `section.key` from its text form"""
        section_name, _, name = key.strip().partition(".")
        if section_name not in self.sections() or not name:
            raise ConfigError(f"Unknown config key '{key}'")
        section = getattr(self, section_name)
        hints = typing.get_type_hints(type(section))
        if name not in hints:
            raise ConfigError(f"Unknown config key '{key}'")

        kind = hints[name]
        try:
            if kind is bool:
                value = _parse_bool(raw)
            elif kind is int:
                value = int(raw.strip())
            elif kind is float:
                value = float(raw.strip())
            elif kind is str:
                value = raw.strip()
            else:
                value = _parse_vector(raw)
        except ValueError as e:
            raise ConfigError(f"Bad value for '{key}': {e}") from None
        setattr(section, name, value)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        config = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got '{line}'")
            config.set(key, raw)
        return config

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from None
        return cls.from_text(text, source=str(path))

    def apply_env(self, environ: Optional[dict] = None) -> "RunConfig":
        """Apply LIO_<SECTION>__<KEY> overrides"""
        environ = os.environ if environ is None else environ
        for env_key, raw in sorted(environ.items()):
            if not env_key.startswith(ENV_PREFIX):
                continue
            section, sep, name = env_key[len(ENV_PREFIX):].partition("__")
            if not sep:
                raise ConfigError(f"Malformed config variable '{env_key}', expected {ENV_PREFIX}<SECTION>__<KEY>")
            self.set(f"{section.lower()}.{name.lower()}", raw)
        return self

    @classmethod
    def load(cls, path=None, environ: Optional[dict] = None) -> "RunConfig":
        """Defaults, then the file (if any), then the environment"""
        if environ is None:
            load_dotenv()
        config = cls.from_file(path) if path is not None else cls()
        config.apply_env(environ)
        config.validate()
        return config

    def dump(self) -> str:
        lines = []
        for section_name in self.sections():
            section = getattr(self, section_name)
            for f in fields(section):
                lines.append(f"{section_name}.{f.name} = {_format_value(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def validate(self) -> bool:
        """Raise ConfigError naming the first bad key"""
        def require(ok: bool, key: str, message: str):
            if not ok:
                raise ConfigError(f"{key} {message}")

        init, imu, feat, mp = self.init, self.imu, self.features, self.map
        lidar, solver, sim = self.lidar, self.solver, self.sim

        require(init.static_seconds > 0, "init.static_seconds", "must be positive")
        require(init.gyro_var_max > 0, "init.gyro_var_max", "must be positive")
        require(init.accel_var_max > 0, "init.accel_var_max", "must be positive")
        require(init.gravity > 0, "init.gravity", "must be positive")

        for name in ("sigma_acc", "sigma_gyro", "sigma_acc_bias", "sigma_gyro_bias"):
            require(getattr(imu, name) > 0, f"imu.{name}", "must be positive")
        require(imu.max_gap > 0, "imu.max_gap", "must be positive")
        require(imu.relinearize_threshold > 0, "imu.relinearize_threshold", "must be positive")

        require(feat.window >= 1, "features.window", "must be at least 1")
        require(feat.sectors >= 1, "features.sectors", "must be at least 1")
        require(feat.max_edges >= 0, "features.max_edges", "must not be negative")
        require(feat.max_planars >= 0, "features.max_planars", "must not be negative")
        require(feat.edge_threshold > feat.planar_threshold, "features.edge_threshold",
                "must exceed features.planar_threshold")
        require(0 <= feat.min_range < feat.max_range, "features.min_range", "must lie in [0, features.max_range)")

        require(mp.voxel_edge > 0, "map.voxel_edge", "must be positive")
        require(mp.voxel_planar > 0, "map.voxel_planar", "must be positive")
        require(mp.neighbors >= 3, "map.neighbors", "must be at least 3")
        require(mp.max_dist > 0, "map.max_dist", "must be positive")
        require(mp.line_ratio > 1, "map.line_ratio", "must exceed 1")
        require(mp.plane_gate > 0, "map.plane_gate", "must be positive")

        require(lidar.sigma > 0, "lidar.sigma", "must be positive")
        require(lidar.huber >= 0, "lidar.huber", "must not be negative")

        require(solver.max_inner >= 1, "solver.max_inner", "must be at least 1")
        require(solver.outer >= 1, "solver.outer", "must be at least 1")
        require(solver.lambda_init >= 0, "solver.lambda_init", "must not be negative")
        require(solver.min_step > 0, "solver.min_step", "must be positive")
        require(solver.min_rel_decrease >= 0, "solver.min_rel_decrease", "must not be negative")
        require(solver.min_correspondences >= 0, "solver.min_correspondences", "must not be negative")

        require(sim.preset in SIM_PRESETS, "sim.preset", f"must be one of {', '.join(SIM_PRESETS)}")
        require(sim.duration > 0, "sim.duration", "must be positive")
        require(sim.imu_rate >= 100, "sim.imu_rate", "must be at least 100 Hz")
        require(sim.scan_rate > 0, "sim.scan_rate", "must be positive")
        require(sim.imu_rate >= 2 * sim.scan_rate, "sim.imu_rate", "must be at least twice sim.scan_rate")
        require(sim.points_per_scan >= 1, "sim.points_per_scan", "must be at least 1")
        require(0 <= sim.edge_fraction <= 1, "sim.edge_fraction", "must lie in [0, 1]")
        for name in ("lidar_noise", "acc_noise", "gyro_noise", "acc_bias_walk", "gyro_bias_walk"):
            require(getattr(sim, name) >= 0, f"sim.{name}", "must not be negative")
        require(sim.ramp >= 0, "sim.ramp", "must not be negative")
        require(sim.translation_frequency > 0, "sim.translation_frequency", "must be positive")
        require(sim.rotation_frequency > 0, "sim.rotation_frequency", "must be positive")

        require(self.eval.max_time_diff > 0, "eval.max_time_diff", "must be positive")
        return True
