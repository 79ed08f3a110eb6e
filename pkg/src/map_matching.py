"""
Global feature map and line/plane correspondence search

Edge and planar points live in separate stores, each voxel-downsampled and
indexed by a scipy cKDTree that is rebuilt after every insertion.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from scan import FeatureCloud

logger = logging.getLogger(__name__)


class CorrespondenceKind(Enum):
    LINE = "line"
    PLANE = "plane"


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Line (n = direction) or plane (n = normal) through p0"""
    kind: CorrespondenceKind
    normal: np.ndarray
    point: np.ndarray
    point_index: int = -1


# Voxels adjacent to a point's own voxel, itself included
_NEIGHBOR_OFFSETS = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]


class PointStore:
    """Downsampled point set: one point per voxel, none closer than half a voxel"""

    def __init__(self, voxel_size: float):
        if voxel_size <= 0.0:
            raise ValueError(f"Voxel size must be positive, got {voxel_size}")
        self.voxel_size = voxel_size
        self.min_spacing = 0.5 * voxel_size
        self._points: list[np.ndarray] = []
        self._voxels: dict[tuple, int] = {}
        self._tree: Optional[cKDTree] = None
        self._array = np.zeros((0, 3))

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._array

    def _key(self, p: np.ndarray) -> tuple:
        return tuple(int(c) for c in np.floor(p / self.voxel_size))

    def _too_close(self, p: np.ndarray, key: tuple) -> bool:
        # min_spacing < voxel_size, so only adjacent voxels can hold a conflict
        for dx, dy, dz in _NEIGHBOR_OFFSETS:
            index = self._voxels.get((key[0] + dx, key[1] + dy, key[2] + dz))
            if index is not None and np.linalg.norm(p - self._points[index]) < self.min_spacing:
                return True
        return False

    def insert(self, points: np.ndarray) -> int:
        """Returns how many points were kept"""
        kept = 0
        for p in np.asarray(points, dtype=float).reshape(-1, 3):
            key = self._key(p)
            if key in self._voxels or self._too_close(p, key):
                continue
            self._voxels[key] = len(self._points)
            self._points.append(p.copy())
            kept += 1

        if kept:
            self._array = np.array(self._points)
            self._tree = cKDTree(self._array)
        return kept

    def nearest(self, query, k: int, max_dist: float) -> Optional[np.ndarray]:
        """
        Indices of the k nearest points, all within max_dist, ordered by
        distance then insertion order; None if fewer than k qualify
        """
        if self._tree is None or len(self._points) < k:
            return None
        dist, idx = self._tree.query(np.asarray(query, dtype=float), k=k, distance_upper_bound=max_dist)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        if not np.all(np.isfinite(dist)):
            return None
        return idx[np.lexsort((idx, dist))]


class GlobalMap:
    """World-frame feature map; queries are read-only"""

    def __init__(self, voxel_edge: float = 0.2, voxel_planar: float = 0.4):
        self.edges = PointStore(voxel_edge)
        self.planars = PointStore(voxel_planar)

    @classmethod
    def from_config(cls, map_config) -> "GlobalMap":
        return cls(map_config.voxel_edge, map_config.voxel_planar)

    def __len__(self) -> int:
        return len(self.edges) + len(self.planars)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def insert_scan(self, features: FeatureCloud) -> "GlobalMap":
        """Insert a world-frame feature cloud"""
        edge_points, planar_points = features.arrays()
        kept_edges = self.edges.insert(edge_points)
        kept_planars = self.planars.insert(planar_points)
        logger.debug(
            f"Map insert: kept {kept_edges}/{len(edge_points)} edges, "
            f"{kept_planars}/{len(planar_points)} planars "
            f"(map {len(self.edges)} edges, {len(self.planars)} planars)"
        )
        return self

    def dump_csv(self, path) -> Path:
        frames = [
            pd.DataFrame(self.edges.points, columns=["x", "y", "z"]).assign(kind="edge"),
            pd.DataFrame(self.planars.points, columns=["x", "y", "z"]).assign(kind="planar"),
        ]
        path = Path(path)
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.9g")
        return path


def _principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centroid, ascending eigenvalues, eigenvectors as columns)"""
    centroid = points.mean(axis=0)
    centered = points - centroid
    values, vectors = np.linalg.eigh(centered.T @ centered / len(points))
    return centroid, values, vectors


def find_line(
    global_map: GlobalMap,
    query,
    k: int = 5,
    max_dist: float = 1.0,
    ratio: float = 3.0,
    point_index: int = -1,
) -> Optional[Correspondence]:
    """Fit a line to the k nearest edge points; None when they are not line-like"""
    idx = global_map.edges.nearest(query, k, max_dist)
    if idx is None:
        return None
    centroid, values, vectors = _principal_axes(global_map.edges.points[idx])
    if not values[2] > ratio * values[1]:
        return None
    direction = vectors[:, 2] / np.linalg.norm(vectors[:, 2])
    return Correspondence(CorrespondenceKind.LINE, direction, centroid, point_index)


def find_plane(
    global_map: GlobalMap,
    query,
    k: int = 5,
    max_dist: float = 1.0,
    gate: float = 0.1,
    point_index: int = -1,
) -> Optional[Correspondence]:
    """Least-squares plane through the k nearest planar points, gated per point"""
    idx = global_map.planars.nearest(query, k, max_dist)
    if idx is None:
        return None
    neighbors = global_map.planars.points[idx]
    centroid, values, vectors = _principal_axes(neighbors)
    # Collinear neighbors leave the normal undetermined
    if values[1] <= 1e-4 * values[2]:
        return None
    normal = vectors[:, 0] / np.linalg.norm(vectors[:, 0])
    distances = np.abs((neighbors - centroid) @ normal)
    if np.any(distances >= gate):
        return None
    return Correspondence(CorrespondenceKind.PLANE, normal, centroid, point_index)
