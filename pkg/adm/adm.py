#!/usr/bin/env python3

"""
Anomaly detection over load measurements.

The ML detector learns, per bus, which windows (P_L[t-l], ..., P_L[t]) of
consecutive LFC-cycle loads are normal: DBSCAN groups the training windows,
every cluster is replaced by the convex hull of its points, and a window is
benign when it lies inside at least one hull of its bus. Hulls are kept in
half-space form, rows [alpha_0 .. alpha_l, offset] with alpha . x + offset <= 0
inside, so the attack MILP can use the coefficients directly.

The rules-based bad data detector only bounds the cycle-to-cycle change.
"""

import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import DBSCAN

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import AllNoise, DegenerateCluster, InsufficientData, MalformedCase
from save_load import load_json_file, save_csv_file, save_json_file
from utils.log import get_logger

logger = get_logger("adm")

MEMBERSHIP_TOL = 1e-9
BDD_TOL = 1e-12
ALARM_LOG_COLUMNS = ["cycle", "bus", "detector", "flagged"]


@dataclass
class ClusterHull:
    vertices: np.ndarray     # m x (l+1), anticlockwise when l = 1
    hyperplanes: np.ndarray  # h x (l+2)

    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    def slack(self, point: Sequence[float]) -> np.ndarray:
        """alpha . x + offset per hyperplane; all entries <= 0 inside"""
        x = np.asarray(point, dtype=float)
        return self.hyperplanes[:, :-1] @ x + self.hyperplanes[:, -1]

    def contains(self, point: Sequence[float], tol: float = MEMBERSHIP_TOL) -> bool:
        return bool(np.all(self.slack(point) <= tol))


@dataclass
class AdmModel:
    per_bus: Dict[int, List[ClusterHull]]
    lookback: int = 1
    dbscan_eps: float = 0.01
    dbscan_min_pts: int = 4
    degenerate_margin: float = 1e-6

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be at least 1")


@dataclass(frozen=True)
class BddRule:
    max_deviation: float = 0.04  # p.u. per LFC cycle

    def __post_init__(self):
        if self.max_deviation <= 0:
            raise ValueError("max_deviation must be positive")


def windows(series: Sequence[float], lookback: int) -> np.ndarray:
    """Consecutive (l+1)-tuples, oldest value first"""
    return sliding_window_view(np.asarray(series, dtype=float), lookback + 1)


def train_dbscan(series: Sequence[float], eps: float, min_pts: int,
                 lookback: int = 1) -> List[np.ndarray]:
    """
    Cluster the benign load windows of one bus

    Args:
        series: benign loads at consecutive LFC cycles, p.u.
        eps: neighbourhood radius, p.u.
        min_pts: neighbourhood size (the point itself included) for a core point
        lookback: l, previous measurements in each window

    Returns:
        One array of member windows per cluster, in DBSCAN label order; noise dropped

    Raises:
        InsufficientData: series length <= l + min_pts
        AllNoise: no window is a core point
    """
    values = np.asarray(series, dtype=float)
    if len(values) <= lookback + min_pts:
        raise InsufficientData(f"{len(values)} samples cannot form {min_pts} windows of "
                               f"length {lookback + 1}")
    points = windows(values, lookback)
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="euclidean").fit(points).labels_
    clusters = [points[labels == label] for label in sorted(set(labels) - {-1})]
    if not clusters:
        raise AllNoise(f"no core point with eps={eps}, min_pts={min_pts}")
    noise = int(np.sum(labels == -1))
    if noise:
        logger.debug("DBSCAN dropped %d noise windows of %d", noise, len(points))
    return clusters


def _is_degenerate(points: np.ndarray) -> bool:
    unique = np.unique(points, axis=0)
    if len(unique) <= points.shape[1]:
        return True
    centered = unique - unique.mean(axis=0)
    return np.linalg.matrix_rank(centered, tol=1e-12) < points.shape[1]


def _thicken(points: np.ndarray, margin: float) -> np.ndarray:
    """Replace every point by the corners of a cube of half-side margin around it"""
    dim = points.shape[1]
    corners = np.array(np.meshgrid(*[[-margin, margin]] * dim)).reshape(dim, -1).T
    unique = np.unique(points, axis=0)
    return (unique[:, None, :] + corners[None, :, :]).reshape(-1, dim)


def _polygon_hyperplanes(vertices: np.ndarray) -> np.ndarray:
    """One edge row per pair of consecutive anticlockwise vertices, unit normals"""
    rows = []
    for k in range(len(vertices)):
        p, q = vertices[k], vertices[(k + 1) % len(vertices)]
        normal = np.array([q[1] - p[1], p[0] - q[0]])
        normal /= np.linalg.norm(normal)
        rows.append([normal[0], normal[1], -normal @ p])
    return np.array(rows)


def hull_from_points(points: np.ndarray, margin: Optional[float] = 1e-6) -> ClusterHull:
    """
    Convex hull of one cluster in half-space form

    Degenerate clusters (too few distinct points, or all on a lower-dimensional
    flat) are thickened by `margin` in every dimension; with margin=None they
    raise DegenerateCluster instead.
    """
    pts = np.asarray(points, dtype=float)
    if _is_degenerate(pts):
        if margin is None:
            raise DegenerateCluster(f"cluster of {len(pts)} points has no full-dimensional hull")
        logger.debug("thickening degenerate cluster of %d points by %g", len(pts), margin)
        pts = _thicken(pts, margin)
    try:
        hull = ConvexHull(pts)
    except QhullError as e:
        if margin is None:
            raise DegenerateCluster(str(e)) from e
        hull = ConvexHull(_thicken(pts, margin))
    vertices = hull.points[hull.vertices]
    if pts.shape[1] == 2:
        # qhull lists 2-D vertices anticlockwise
        hyperplanes = _polygon_hyperplanes(vertices)
    else:
        hyperplanes = np.unique(np.round(hull.equations, 15), axis=0)
    return ClusterHull(vertices=vertices.copy(), hyperplanes=hyperplanes)


def hulls_from_clusters(clusters: Sequence[np.ndarray], margin: Optional[float] = 1e-6) -> List[ClusterHull]:
    """Convex hull per DBSCAN cluster"""
    return [hull_from_points(cluster, margin) for cluster in clusters]


def train_adm(series_by_bus: Dict[int, Sequence[float]], eps: float = 0.01, min_pts: int = 4,
              lookback: int = 1, margin: float = 1e-6) -> AdmModel:
    """
    Train one detector per bus with a nonzero load

    Args:
        series_by_bus: benign per-cycle load series keyed by bus id
    """
    per_bus = {}
    for bus in sorted(series_by_bus):
        series = np.asarray(series_by_bus[bus], dtype=float)
        if not np.any(series > 0):
            continue
        clusters = train_dbscan(series, eps, min_pts, lookback)
        per_bus[bus] = hulls_from_clusters(clusters, margin)
        logger.info("bus %d: %d clusters", bus, len(per_bus[bus]))
    return AdmModel(per_bus, lookback, eps, min_pts, margin)


def is_benign(model: AdmModel, bus: int, window: Sequence[float]) -> bool:
    """
    True iff the window lies inside at least one hull of the bus

    Buses without a trained model have no load measurement to check and are
    always benign.
    """
    window = np.asarray(window, dtype=float)
    if window.shape != (model.lookback + 1,):
        raise ValueError(f"window must hold {model.lookback + 1} loads")
    hulls = model.per_bus.get(bus)
    if hulls is None:
        return True
    return any(hull.contains(window) for hull in hulls)


def check_perception(model: AdmModel, history: np.ndarray, bus_ids: Sequence[int]) -> List[int]:
    """
    Buses whose latest window is anomalous

    Args:
        history: (l+1) x buses perceived loads at consecutive cycles, oldest first
        bus_ids: bus id of every column
    """
    history = np.asarray(history, dtype=float)
    return [bus for k, bus in enumerate(bus_ids) if not is_benign(model, bus, history[:, k])]


def bdd_check(rule: BddRule, prev_load: float, curr_load: float) -> bool:
    """True iff |curr - prev| <= max_deviation (boundary inclusive)"""
    return abs(curr_load - prev_load) <= rule.max_deviation + BDD_TOL


def detector_complexity(model: AdmModel, training_size: int) -> List[Dict[str, Any]]:
    """Cost model of the detector stages for the report"""
    hulls = [h for bus_hulls in model.per_bus.values() for h in bus_hulls]
    max_planes = max((len(h.hyperplanes) for h in hulls), default=0)
    return [
        {"stage": "dbscan_training", "complexity": "O(|D|^2)", "size": training_size},
        {"stage": "hull_construction", "complexity": "O(|D| log |D|)", "size": training_size},
        {"stage": "membership", "complexity": "O(N_C * N_H)",
         "size": len(hulls) * max_planes},
    ]


def adm_to_dict(model: AdmModel) -> Dict[str, Any]:
    return {
        str(bus): {
            "lookback": model.lookback,
            "dbscan_eps": model.dbscan_eps,
            "dbscan_min_pts": model.dbscan_min_pts,
            "degenerate_margin": model.degenerate_margin,
            "clusters": [{"vertices": h.vertices.tolist(), "hyperplanes": h.hyperplanes.tolist()}
                         for h in hulls],
        }
        for bus, hulls in sorted(model.per_bus.items())
    }


def save_adm(model: AdmModel, path: str) -> bool:
    """Model file: {bus: {lookback, clusters: [{vertices, hyperplanes}]}}"""
    return save_json_file(path, adm_to_dict(model))


def load_adm(path: str) -> AdmModel:
    data = load_json_file(path)
    if not isinstance(data, dict) or not data:
        raise MalformedCase(f"{path}: ADM model file is empty")
    per_bus = {}
    meta = {}
    for key, entry in data.items():
        try:
            per_bus[int(key)] = [
                ClusterHull(np.array(c["vertices"], dtype=float), np.array(c["hyperplanes"], dtype=float))
                for c in entry["clusters"]
            ]
            meta = entry
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedCase(f"{path}: bad entry for bus {key}: {e}") from e
    return AdmModel(per_bus, int(meta.get("lookback", 1)), float(meta.get("dbscan_eps", 0.01)),
                    int(meta.get("dbscan_min_pts", 4)), float(meta.get("degenerate_margin", 1e-6)))


def export_alarm_log(alarms: List[Dict[str, Any]], path: str) -> str:
    """Alarm log CSV: cycle, bus, detector, flagged"""
    return save_csv_file(path, alarms, ALARM_LOG_COLUMNS)
