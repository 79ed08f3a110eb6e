"""
Trajectory files and accuracy metrics

Files hold one pose per line, `t x y z qx qy qz qw`, space separated with
the quaternion scalar-last. Estimates and ground truth share the world frame
by construction, so ATE is computed without alignment.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from colorama import Fore, Style

from geometry import RigidTransform, UnitQuaternion

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]


class TrajectoryError(ValueError):
    """Unusable trajectory input"""


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray  # (N, 4) as x, y, z, w

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Sequence[RigidTransform]) -> "Trajectory":
        return cls(
            times=np.asarray(times, dtype=float),
            positions=np.array([p.translation for p in poses]).reshape(-1, 3),
            quaternions=np.array([p.rotation.xyzw for p in poses]).reshape(-1, 4),
        )

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform(UnitQuaternion.from_xyzw(self.quaternions[i]), self.positions[i])


def read_trajectory(path) -> Trajectory:
    try:
        df = pd.read_csv(path, sep=r"\s+", header=None, comment="#", names=TRAJECTORY_COLUMNS)
    except pd.errors.EmptyDataError:
        raise TrajectoryError(f"{path}: trajectory file is empty") from None
    except OSError as e:
        raise TrajectoryError(f"{path}: {e}") from None
    if df.empty:
        raise TrajectoryError(f"{path}: trajectory file is empty")
    if df.isna().any().any():
        raise TrajectoryError(f"{path}: every line needs 8 values `t x y z qx qy qz qw`")
    data = df.to_numpy(dtype=float)
    return Trajectory(times=data[:, 0], positions=data[:, 1:4], quaternions=data[:, 4:8])


def write_trajectory(trajectory: Trajectory, path) -> Path:
    df = pd.DataFrame(
        np.column_stack([trajectory.times, trajectory.positions, trajectory.quaternions]),
        columns=TRAJECTORY_COLUMNS,
    )
    path = Path(path)
    df.to_csv(path, sep=" ", header=False, index=False, float_format="%.12g")
    return path


def associate(gt: Trajectory, est: Trajectory, max_diff: float = 0.001) -> list[tuple[int, int]]:
    """(gt index, est index) pairs whose timestamps differ by at most max_diff"""
    if len(gt) == 0 or len(est) == 0:
        raise TrajectoryError("Cannot associate an empty trajectory")
    order = np.argsort(gt.times, kind="stable")
    sorted_times = gt.times[order]
    pairs = []
    for j, t in enumerate(est.times):
        k = int(np.searchsorted(sorted_times, t))
        candidates = [c for c in (k - 1, k) if 0 <= c < len(sorted_times)]
        best = min(candidates, key=lambda c: abs(sorted_times[c] - t))
        if abs(sorted_times[best] - t) <= max_diff:
            pairs.append((int(order[best]), j))
    if not pairs:
        raise TrajectoryError(f"No timestamps associate within {max_diff * 1e3:.3f} ms")
    return pairs


@dataclass
class TrajectoryMetrics:
    pairs: int
    ate_rmse: float  # m
    ate_max: float  # m
    rpe_trans_rmse: float  # m per scan pair
    rpe_rot_rmse: float  # rad per scan pair
    final_rot_error: float  # rad

    @property
    def rpe_rot_rmse_deg(self) -> float:
        return math.degrees(self.rpe_rot_rmse)


def evaluate(gt: Trajectory, est: Trajectory, max_diff: float = 0.001) -> TrajectoryMetrics:
    """ATE over associated poses, RPE over consecutive associated pairs"""
    pairs = associate(gt, est, max_diff)
    errors = np.array([np.linalg.norm(est.positions[j] - gt.positions[i]) for i, j in pairs])

    trans_errors, rot_errors = [], []
    for (i0, j0), (i1, j1) in zip(pairs[:-1], pairs[1:]):
        gt_rel = gt.pose(i0).inverse() @ gt.pose(i1)
        est_rel = est.pose(j0).inverse() @ est.pose(j1)
        delta = gt_rel.inverse() @ est_rel
        trans_errors.append(np.linalg.norm(delta.translation))
        rot_errors.append(delta.angle)

    i_last, j_last = pairs[-1]
    final = gt.pose(i_last).rotation.conjugate() * est.pose(j_last).rotation

    def rmse(values) -> float:
        return float(math.sqrt(np.mean(np.square(values)))) if len(values) else 0.0

    return TrajectoryMetrics(
        pairs=len(pairs),
        ate_rmse=rmse(errors),
        ate_max=float(errors.max()),
        rpe_trans_rmse=rmse(trans_errors),
        rpe_rot_rmse=rmse(rot_errors),
        final_rot_error=final.angle,
    )


def print_metrics(metrics: TrajectoryMetrics, max_ate: Optional[float] = None) -> bool:
    """Print the results; returns False when max_ate is exceeded"""
    passed = max_ate is None or metrics.ate_rmse <= max_ate
    color = Fore.GREEN if passed else Fore.RED

    print("\n" + "=" * 50)
    print(f"{Fore.CYAN}TRAJECTORY EVALUATION{Style.RESET_ALL}")
    print("=" * 50)
    print(f"Associated poses: {metrics.pairs}")
    print(f"ATE RMSE:         {color}{metrics.ate_rmse:.6f} m{Style.RESET_ALL}")
    print(f"ATE max:          {metrics.ate_max:.6f} m")
    print(f"RPE trans RMSE:   {metrics.rpe_trans_rmse:.6f} m")
    print(f"RPE rot RMSE:     {metrics.rpe_rot_rmse_deg:.6f} deg")
    print(f"Final rot error:  {math.degrees(metrics.final_rot_error):.6f} deg")
    if max_ate is not None:
        verdict = "PASS" if passed else "FAIL"
        print(f"Threshold:        {color}{verdict} (max {max_ate:.6f} m){Style.RESET_ALL}")
    print("=" * 50)
    return passed
