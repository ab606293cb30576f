"""Clustering-based vehicle detection: ground removal, DBSCAN, size filter.

Boxes are axis-aligned in the frame of the input cloud and scored by the
number of points in their supporting cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ._backend import kernels
from .geometry import PointCloud


@dataclass(frozen=True)
class DetectorConfig:
    ransac_distance: float = 0.2
    ransac_sample: int = 3
    ransac_iters: int = 3000
    ransac_passes: int = 2
    dbscan_eps: float = 1.25
    dbscan_min_pts: int = 3
    length: tuple = (0.5, 6.0)
    width: tuple = (0.5, 3.0)
    height: tuple = (0.1, 2.0)
    # adaptive stop: quit once a better plane is this unlikely to exist
    ransac_probability: float = 0.99999999
    # a later pass removes its plane only if it holds this share of the input
    min_plane_fraction: float = 0.1
    # ... and only if its inliers sit within this distance of the first plane,
    # so it takes residual ground (kerbs, slopes) but not a row of car roofs
    ground_step: float = 0.5

    def __post_init__(self):
        if self.ransac_distance <= 0 or self.dbscan_eps <= 0:
            raise ValueError("distances must be > 0")
        if self.ransac_sample != 3:
            raise ValueError("plane fitting needs exactly 3 sample points")
        if self.ransac_iters < 1 or self.ransac_passes < 0 or self.dbscan_min_pts < 1:
            raise ValueError("iteration and point counts must be positive")
        for name in ("length", "width", "height"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"{name} bounds must satisfy 0 < min < max")
        if not 0 < self.ransac_probability < 1:
            raise ValueError("ransac_probability must be in (0, 1)")
        if not 0 <= self.min_plane_fraction <= 1:
            raise ValueError("min_plane_fraction must be in [0, 1]")
        if self.ground_step < 0:
            raise ValueError("ground_step must be >= 0")


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    ex: float
    ey: float
    ez: float
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.ex, self.ey, self.ez) <= 0:
            raise ValueError("box extents must be > 0")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = []
        for sx in (-0.5, 0.5):
            for sy in (-0.5, 0.5):
                for sz in (-0.5, 0.5):
                    lx, ly = sx * self.ex, sy * self.ey
                    out.append((self.cx + c * lx - s * ly, self.cy + s * lx + c * ly,
                                self.cz + sz * self.ez))
        return np.array(out)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    source: tuple
    frame_id: str


def _plane_samples(rng: np.random.Generator, n: int, iters: int) -> np.ndarray:
    """``iters`` uniformly drawn triples of distinct point indices."""
    a = rng.integers(0, n, size=iters)
    b = rng.integers(0, n - 1, size=iters)
    b += b >= a
    c = rng.integers(0, n - 2, size=iters)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c += c >= lo
    c += c >= hi
    return np.stack([a, b, c], axis=1).astype(np.int64)


def ground_plane_mask(cloud: PointCloud, cfg: DetectorConfig = DetectorConfig(),
                      seed: int = 0) -> np.ndarray:
    """Boolean mask of points removed as ground over up to ``cfg.ransac_passes`` passes.

    Each pass fits a plane to the points left by the previous one. A pass after
    the first removes its plane only if it holds at least
    ``cfg.min_plane_fraction`` of the input and its inliers lie within
    ``cfg.ground_step`` (median) of the first plane, so elevated flat surfaces
    such as car roofs survive.
    """
    n0 = len(cloud)
    keep = np.arange(n0)
    xyz = cloud.xyz
    ground = None
    for k in range(cfg.ransac_passes):
        n = len(keep)
        if n < cfg.ransac_sample:
            break
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(k,)))
        pts = np.ascontiguousarray(xyz[keep])
        samples = _plane_samples(rng, n, cfg.ransac_iters)
        plane, count, _ = kernels.ransac_plane(pts, samples, cfg.ransac_distance,
                                               cfg.ransac_probability)
        if count == 0 or (k > 0 and count < cfg.min_plane_fraction * n0):
            break
        inl = kernels.plane_inliers(pts, plane, cfg.ransac_distance)
        if ground is None:
            ground = plane
        elif np.median(np.abs(pts[inl] @ ground[:3] + ground[3])) > cfg.ground_step:
            break
        keep = keep[~inl]
    removed = np.ones(n0, dtype=bool)
    removed[keep] = False
    return removed


def ransac_ground_removal(cloud: PointCloud, cfg: DetectorConfig = DetectorConfig(),
                          seed: int = 0) -> PointCloud:
    """Points that survive ground-plane removal, in their original order."""
    removed = ground_plane_mask(cloud, cfg, seed)
    if not removed.any():
        return cloud
    return cloud.subset(~removed)


def dbscan(cloud: PointCloud, eps: float, min_pts: int) -> list:
    """Clusters as arrays of point indices, ordered by their first core point."""
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    if len(cloud) == 0:
        return []
    labels, _ = kernels.dbscan(np.ascontiguousarray(cloud.xyz), float(eps), int(min_pts))
    n_clusters = int(labels.max()) + 1 if len(labels) else 0
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_clusters + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n_clusters)]


def cluster_box(xyz: np.ndarray) -> Box3D:
    lo = xyz.min(axis=0)
    hi = xyz.max(axis=0)
    c = 0.5 * (lo + hi)
    e = hi - lo
    return Box3D(float(c[0]), float(c[1]), float(c[2]), float(e[0]), float(e[1]), float(e[2]))


def _within(value: float, bounds: tuple) -> bool:
    return bounds[0] <= value <= bounds[1]


def size_filter(clusters: Iterable[np.ndarray], cloud: PointCloud,
                cfg: DetectorConfig = DetectorConfig(), source: Sequence[str] = (),
                point_source: Optional[np.ndarray] = None) -> list:
    """Axis-aligned boxes of the clusters whose extents look like a vehicle.

    ``point_source`` optionally labels every point with its sensor id; a box
    then lists the sensors that saw it.
    """
    xyz = cloud.xyz
    src = tuple(source) or (cloud.frame_id,)
    out = []
    for idx in clusters:
        pts = xyz[idx]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        ex, ey, ez = (float(v) for v in hi - lo)
        length, width = max(ex, ey), min(ex, ey)
        if not (_within(length, cfg.length) and _within(width, cfg.width)
                and _within(ez, cfg.height)):
            continue
        if point_source is not None:
            src = tuple(sorted(set(point_source[idx].tolist())))
        out.append(Detection(cluster_box(pts), float(len(idx)), src, cloud.frame_id))
    return out


def detect(cloud: PointCloud, cfg: DetectorConfig = DetectorConfig(), seed: int = 0,
           source: Sequence[str] = (), point_source: Optional[np.ndarray] = None) -> list:
    """Ground removal, clustering and size filtering; boxes stay in the cloud's frame."""
    removed = ground_plane_mask(cloud, cfg, seed)
    above = cloud.subset(~removed) if removed.any() else cloud
    if point_source is not None:
        point_source = np.asarray(point_source)[~removed]
    clusters = dbscan(above, cfg.dbscan_eps, cfg.dbscan_min_pts)
    return size_filter(clusters, above, cfg, source, point_source)


# -- text records ------------------------------------------------------------

def format_detections(frame: int | str, detections: Iterable[Detection]) -> str:
    """``frame sensor cx cy cz ex ey ez score`` per detection."""
    lines = []
    for d in detections:
        b = d.box
        sensor = "+".join(d.source) if d.source else d.frame_id
        lines.append(f"{frame} {sensor} {b.cx:.6f} {b.cy:.6f} {b.cz:.6f} "
                     f"{b.ex:.6f} {b.ey:.6f} {b.ez:.6f} {d.score:g}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str, frame_id: str = "global") -> list:
    """Inverse of :func:`format_detections`; returns ``(frame, Detection)`` pairs."""
    out = []
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        f = ln.split()
        if len(f) != 9:
            raise ValueError(f"detection record needs 9 fields: {ln!r}")
        box = Box3D(*(float(v) for v in f[2:8]))
        out.append((f[0], Detection(box, float(f[8]), tuple(f[1].split("+")), frame_id)))
    return out
