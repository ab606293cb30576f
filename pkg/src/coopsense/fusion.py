"""Decision-level merging of detections into lane-level vehicle observations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .detection import Box3D, Detection
from .geometry import Pose, local_to_global, wrap_angle
from .network import RoadNetwork, point_in_polygon

GLOBAL_FRAME = "global"


@dataclass(frozen=True)
class FusedVehicleObservation:
    x: float
    y: float
    lane_id: str
    dist_to_bar: float
    sources: tuple = ()
    gt_id: Optional[int] = None


def to_global(detections: Iterable[Detection], pose: Pose, mount_height: float) -> list:
    """Move box centres into the global frame; extents are kept, yaw follows the sensor."""
    dets = list(detections)
    if not dets:
        return []
    tf = local_to_global(pose, mount_height)
    centers = tf.apply(np.array([[d.box.cx, d.box.cy, d.box.cz] for d in dets]))
    out = []
    for d, c in zip(dets, centers):
        b = d.box
        box = Box3D(float(c[0]), float(c[1]), float(c[2]), b.ex, b.ey, b.ez,
                    wrap_angle(b.yaw + pose.yaw))
        out.append(Detection(box, d.score, d.source, GLOBAL_FRAME))
    return out


def _planar_distance(d: Detection, point: Sequence[float]) -> float:
    return math.hypot(d.box.cx - point[0], d.box.cy - point[1])


def dedupe(detections: Iterable[Detection], threshold: float = 5.0,
           intersection_center: Sequence[float] = (0.0, 0.0)) -> list:
    """Keep detections nearest the intersection first, dropping any within ``threshold`` of a kept one."""
    ranked = sorted(detections, key=lambda d: _planar_distance(d, intersection_center))
    kept: list = []
    for d in ranked:
        if all(math.hypot(d.box.cx - k.box.cx, d.box.cy - k.box.cy) >= threshold for k in kept):
            kept.append(d)
    return kept


def geofence(detections: Iterable[Detection], polygon) -> list:
    return [d for d in detections if point_in_polygon(d.box.cx, d.box.cy, polygon)]


def locate(x: float, y: float, network: RoadNetwork):
    """``(lane, dist_to_bar)`` of the nearest centreline within one lane width, else None."""
    best = None
    best_off = math.inf
    for lane in network.lanes:
        dist, lat = lane.coords(x, y)
        dist, lat = float(dist), abs(float(lat))
        if not -lane.downstream_extent <= dist <= lane.upstream_length:
            continue
        if lat > lane.width or lat >= best_off:
            continue
        best, best_off = (lane, dist), lat
    return best


def lane_map(detections: Iterable[Detection], network: RoadNetwork) -> list:
    out = []
    for d in detections:
        hit = locate(d.box.cx, d.box.cy, network)
        if hit is None:
            continue
        lane, dist = hit
        out.append(FusedVehicleObservation(d.box.cx, d.box.cy, lane.id, dist, tuple(d.source)))
    return out


@dataclass
class FusionResult:
    fenced: list = field(default_factory=list)
    deduped: list = field(default_factory=list)
    observations: list = field(default_factory=list)


def fuse(global_detections: Iterable[Detection], network: RoadNetwork,
         threshold: float = 5.0) -> FusionResult:
    """Geofence, dedupe and lane-map detections already in the global frame.

    Geofencing runs first so off-road clutter cannot displace a vehicle during
    dedupe.
    """
    fenced = geofence(global_detections, network.geofence_polygon)
    kept = dedupe(fenced, threshold, network.intersection_center)
    return FusionResult(fenced, kept, lane_map(kept, network))


def format_observations(frame: int, observations: Iterable[FusedVehicleObservation]) -> str:
    """``frame lane dist_to_bar x y`` per observation."""
    return "".join(f"{frame} {o.lane_id} {o.dist_to_bar:.6f} {o.x:.6f} {o.y:.6f}\n"
                   for o in observations)


def parse_observations(text: str) -> list:
    """Inverse of :func:`format_observations`; returns ``(frame, observation)`` pairs."""
    out = []
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        f = ln.split()
        if len(f) != 5:
            raise ValueError(f"observation record needs 5 fields: {ln!r}")
        out.append((int(f[0]), FusedVehicleObservation(float(f[3]), float(f[4]), f[1], float(f[2]))))
    return out
