"""
LiDAR-inertial odometry pipeline

Per scan: transform to the IMU frame, pick features, estimate the scan end
state against the previous one and the global map, then insert the
undistorted features into the map.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from config import RunConfig
from estimator import DegenerateScanError, OptimizationReport, ScanEstimator
from evaluation import Trajectory
from imu import ImuSample, TIME_TOLERANCE, slice_window, static_initialize
from map_matching import GlobalMap
from scan import FeatureCloud, FeatureParams, RawScan, extract_features, features_from_labels, scan_transform
from state import State

logger = logging.getLogger(__name__)


@dataclass
class ScanRecord:
    """One row of the run report"""
    index: int
    t: float
    degenerate: bool
    num_features: int
    report: Optional[OptimizationReport]

    def as_row(self) -> dict:
        row = {"index": self.index, "t": self.t, "degenerate": self.degenerate, "num_features": self.num_features}
        row.update((self.report or OptimizationReport()).as_row())
        return row


class LidarInertialOdometry:
    """
    Sequential odometry driver

    1. Static initialization over the IMU data before the first scan end
    2. The first scan bootstraps the map at the initial pose
    3. Every later scan is estimated and merged into the map
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.estimator = ScanEstimator(config)
        self.map = GlobalMap.from_config(config.map)
        self.extrinsic = config.scan.extrinsic()
        self.feature_params = FeatureParams.from_config(config.features)

        self.state: Optional[State] = None
        self.states: list[State] = []
        self.records: list[ScanRecord] = []
        self.degenerate_scans = 0

    def features(self, scan: RawScan) -> FeatureCloud:
        """IMU-frame features; labeled scans skip extraction"""
        scan = scan_transform(scan, self.extrinsic)
        if scan.is_labeled:
            return features_from_labels(scan, self.feature_params.min_range, self.feature_params.max_range)
        return extract_features(scan, self.feature_params)

    def initialize(self, imu: Sequence[ImuSample], first_scan: RawScan) -> State:
        init = self.config.init
        t0 = first_scan.t_end
        window = [s for s in imu if t0 - init.static_seconds - TIME_TOLERANCE <= s.t <= t0 + TIME_TOLERANCE]
        imu_state, orientation = static_initialize(
            window,
            min_duration=init.static_seconds,
            gravity=init.gravity,
            gyro_var_max=init.gyro_var_max,
            accel_var_max=init.accel_var_max,
        )
        self.state = State(
            q=orientation,
            acc_bias=imu_state.acc_bias,
            gyro_bias=imu_state.gyro_bias,
            t=t0,
        )

        features = self.features(first_scan)
        self.map.insert_scan(features.transformed(self.state.pose))
        if self.map.is_empty:
            logger.warning("First scan left the map empty")
        self.states.append(self.state)
        self.records.append(ScanRecord(0, t0, False, len(features), None))
        logger.info(
            f"Initialized at t={t0:.3f} with {len(features)} features; "
            f"map has {len(self.map.edges)} edges, {len(self.map.planars)} planars"
        )
        return self.state

    def process_scan(self, scan: RawScan, imu: Sequence[ImuSample]) -> tuple[State, Optional[OptimizationReport]]:
        if self.state is None:
            raise RuntimeError("Odometry must be initialized before processing scans")

        prev = self.state
        window = slice_window(imu, prev.t, scan.t_end)
        features = self.features(scan)
        index = len(self.states)

        try:
            state, report = self.estimator.estimate(prev, features, window, self.map)
        except DegenerateScanError as e:
            logger.warning(f"Scan {index} at t={scan.t_end:.3f}: {e}")
            self.degenerate_scans += 1
            state, report = e.fallback_state, None
            # A sparse bootstrap map only densifies if these scans go in too
            if self.config.map.insert_degenerate:
                self.map.insert_scan(self.estimator.undistort_features(prev, state, features, window))
        else:
            undistort_at = self.estimator.predict(prev, window) if self.config.solver.one_pass else None
            world = self.estimator.undistort_features(prev, state, features, window, undistort_at)
            self.map.insert_scan(world)
            logger.info(
                f"Scan {index} t={state.t:.3f}: p=({state.p[0]:.3f}, {state.p[1]:.3f}, {state.p[2]:.3f}) "
                f"lines={report.num_line_factors} planes={report.num_plane_factors} "
                f"cost {report.initial_cost:.3e}->{report.final_cost:.3e} "
                f"rms={report.lidar_rms:.4f} m"
            )

        self.state = state
        self.states.append(state)
        self.records.append(ScanRecord(index, state.t, report is None, len(features), report))
        return state, report

    def run(self, imu: Sequence[ImuSample], scans: Iterable[RawScan]) -> list[State]:
        scans = iter(scans)
        first = next(scans, None)
        if first is None:
            raise ValueError("No scans to process")
        self.initialize(imu, first)
        for scan in scans:
            self.process_scan(scan, imu)
        return self.states

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses([s.t for s in self.states], [s.pose for s in self.states])
