"""
Scan container, LiDAR-to-IMU transformation and edge/planar feature extraction

Features follow the LOAM recipe in simplified form: a per-ring curvature
over a symmetric window, the sharpest points of every angular sector become
edges and the flattest become planars, with non-maximum suppression.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from geometry import RigidTransform

logger = logging.getLogger(__name__)

SCAN_COLUMNS = ["t", "x", "y", "z", "ring", "label"]
INDEX_COLUMNS = ["index", "t_start", "t_end"]

_TIME_TOLERANCE = 1e-9


class FeatureLabel(Enum):
    UNLABELED = -1
    EDGE = 0
    PLANAR = 1


@dataclass(frozen=True, eq=False)
class RawScan:
    """One sweep; point i was measured at times[i] in the sensor frame at that time"""
    times: np.ndarray
    points: np.ndarray
    t_start: float
    t_end: float
    rings: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(times)
        if len(points) != n:
            raise ValueError(f"Scan has {n} timestamps but {len(points)} points")
        if not self.t_end > self.t_start:
            raise ValueError(f"Scan end {self.t_end} must follow start {self.t_start}")
        if n and (times.min() < self.t_start - _TIME_TOLERANCE or times.max() > self.t_end + _TIME_TOLERANCE):
            raise ValueError(f"Point times outside scan [{self.t_start}, {self.t_end}]")

        rings = np.zeros(n, dtype=int) if self.rings is None else np.asarray(self.rings, dtype=int).reshape(-1)
        labels = (
            np.full(n, FeatureLabel.UNLABELED.value, dtype=int)
            if self.labels is None
            else np.asarray(self.labels, dtype=int).reshape(-1)
        )
        if len(rings) != n or len(labels) != n:
            raise ValueError("Scan rings/labels length does not match the points")

        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "rings", rings)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def is_labeled(self) -> bool:
        return bool(np.any(self.labels != FeatureLabel.UNLABELED.value))


@dataclass(frozen=True, eq=False)
class FeaturePoint:
    t: float
    p: np.ndarray
    label: FeatureLabel
    curvature: float = 0.0


@dataclass
class FeatureCloud:
    edges: list = field(default_factory=list)
    planars: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.edges) + len(self.planars)

    def points(self) -> list:
        """Edges first, then planars"""
        return list(self.edges) + list(self.planars)

    def transformed(self, transform: RigidTransform) -> "FeatureCloud":
        def move(points):
            return [replace(fp, p=transform.apply(fp.p)) for fp in points]
        return FeatureCloud(move(self.edges), move(self.planars))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(edge points, planar points) as (N, 3) arrays"""
        def stack(points):
            return np.array([fp.p for fp in points]).reshape(-1, 3)
        return stack(self.edges), stack(self.planars)


@dataclass(frozen=True)
class FeatureParams:
    window: int = 5
    sectors: int = 6
    max_edges: int = 2
    max_planars: int = 4
    edge_threshold: float = 0.05
    planar_threshold: float = 0.01
    min_range: float = 0.5
    max_range: float = 100.0

    @classmethod
    def from_config(cls, features_config) -> "FeatureParams":
        return cls(
            window=features_config.window,
            sectors=features_config.sectors,
            max_edges=features_config.max_edges,
            max_planars=features_config.max_planars,
            edge_threshold=features_config.edge_threshold,
            planar_threshold=features_config.planar_threshold,
            min_range=features_config.min_range,
            max_range=features_config.max_range,
        )


def scan_transform(scan: RawScan, extrinsic: RigidTransform) -> RawScan:
    """Express every point in the IMU frame; timestamps unchanged"""
    return replace(scan, points=extrinsic.apply(scan.points))


def compute_curvature(points: np.ndarray, window: int) -> np.ndarray:
    """
    c_j = ‖Σ_i (p_i − p_j)‖ / (2·window·‖p_j‖) over the window each side

    Points closer than `window` to either end get NaN.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    curvature = np.full(n, np.nan)
    if n < 2 * window + 1:
        return curvature

    # Sliding sums via cumulative sums
    csum = np.vstack([np.zeros(3), np.cumsum(points, axis=0)])
    centers = np.arange(window, n - window)
    neighbor_sum = csum[centers + window + 1] - csum[centers - window] - points[centers]
    diff = neighbor_sum - 2 * window * points[centers]
    norms = np.linalg.norm(points[centers], axis=1)
    curvature[centers] = np.linalg.norm(diff, axis=1) / (2 * window * norms)
    return curvature


def _select_ring(ring_points: np.ndarray, ring_times: np.ndarray, params: FeatureParams) -> tuple[list, list]:
    curvature = compute_curvature(ring_points, params.window)
    n = len(ring_points)
    w = params.window
    picked = np.zeros(n, dtype=bool)
    sectors = []
    for s in range(params.sectors):
        start = w + (n - 2 * w) * s // params.sectors
        end = w + (n - 2 * w) * (s + 1) // params.sectors
        if end > start:
            sectors.append(np.arange(start, end))

    def pick(idx, order, limit, accept, label) -> list:
        chosen = []
        for j in idx[order]:
            if len(chosen) >= limit or not accept(curvature[j]):
                break
            if picked[j]:
                continue
            chosen.append(FeaturePoint(ring_times[j], ring_points[j], label, float(curvature[j])))
            picked[max(0, j - w):min(n, j + w + 1)] = True
        return chosen

    # Edges over every sector first so planar suppression cannot hide a crease
    edges, planars = [], []
    for idx in sectors:
        order = np.argsort(-curvature[idx], kind="stable")
        edges += pick(idx, order, params.max_edges, lambda c: c > params.edge_threshold, FeatureLabel.EDGE)
    for idx in sectors:
        order = np.argsort(curvature[idx], kind="stable")
        planars += pick(idx, order, params.max_planars, lambda c: c < params.planar_threshold, FeatureLabel.PLANAR)
    return edges, planars


def extract_features(scan: RawScan, params: FeatureParams = FeatureParams()) -> FeatureCloud:
    """
    Edge and planar features of an IMU-frame scan, ring by ring

    Rings too short for the curvature window are skipped with a warning.
    """
    cloud = FeatureCloud()
    ranges = np.linalg.norm(scan.points, axis=1)
    in_range = (ranges >= params.min_range) & (ranges <= params.max_range)

    for ring in np.unique(scan.rings):
        mask = (scan.rings == ring) & in_range
        idx = np.flatnonzero(mask)
        idx = idx[np.argsort(scan.times[idx], kind="stable")]
        if len(idx) < 2 * params.window + 1:
            logger.warning(
                f"Ring {ring} has {len(idx)} usable points, need {2 * params.window + 1}; skipped"
            )
            continue
        edges, planars = _select_ring(scan.points[idx], scan.times[idx], params)
        cloud.edges.extend(edges)
        cloud.planars.extend(planars)

    logger.debug(f"Extracted {len(cloud.edges)} edges and {len(cloud.planars)} planars")
    return cloud


def features_from_labels(scan: RawScan, min_range: float = 0.5, max_range: float = 100.0) -> FeatureCloud:
    """Use pre-assigned labels instead of curvature-based selection"""
    cloud = FeatureCloud()
    ranges = np.linalg.norm(scan.points, axis=1)
    for t, p, label, r in zip(scan.times, scan.points, scan.labels, ranges):
        if not min_range <= r <= max_range:
            continue
        if label == FeatureLabel.EDGE.value:
            cloud.edges.append(FeaturePoint(float(t), p.copy(), FeatureLabel.EDGE))
        elif label == FeatureLabel.PLANAR.value:
            cloud.planars.append(FeaturePoint(float(t), p.copy(), FeatureLabel.PLANAR))
    return cloud


def write_scan_csv(scan: RawScan, path, float_format: Optional[str] = "%.12g") -> Path:
    df = pd.DataFrame({
        "t": scan.times,
        "x": scan.points[:, 0],
        "y": scan.points[:, 1],
        "z": scan.points[:, 2],
        "ring": scan.rings,
        "label": scan.labels,
    })
    path = Path(path)
    df.to_csv(path, index=False, float_format=float_format)
    return path


def read_scan_csv(path, t_start: Optional[float] = None, t_end: Optional[float] = None) -> RawScan:
    """
    Load a scan; sweep bounds default to the first/last point time
    """
    df = pd.read_csv(path)
    for column in ("t", "x", "y", "z"):
        if column not in df.columns:
            raise ValueError(f"{path}: missing scan column '{column}'")
    times = df["t"].to_numpy(dtype=float)
    points = df[["x", "y", "z"]].to_numpy(dtype=float)
    rings = df["ring"].to_numpy(dtype=int) if "ring" in df.columns else None
    labels = df["label"].to_numpy(dtype=int) if "label" in df.columns else None
    if t_start is None:
        t_start = float(times.min())
    if t_end is None:
        t_end = float(times.max())
    return RawScan(times, points, t_start, t_end, rings=rings, labels=labels)


def write_scan_index(rows: list[tuple[int, float, float]], path) -> Path:
    df = pd.DataFrame(rows, columns=INDEX_COLUMNS)
    path = Path(path)
    df.to_csv(path, index=False, float_format="%.12g")
    return path


def read_scan_index(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = [c for c in INDEX_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing scan index columns {missing}")
    return df.sort_values("index").reset_index(drop=True)


def scan_file_name(index: int) -> str:
    return f"scan_{index:04d}.csv"
