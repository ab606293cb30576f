"""Synthetic spinning-LiDAR frames by ray casting boxes and a flat ground plane."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from ._backend import GROUND_HIT, NO_HIT, kernels
from ._pykernels import box_columns
from .geometry import PointCloud, Pose, SensorFrame, pose_rotation, sensor_origin

BOX_INTENSITY = 1.0
GROUND_INTENSITY = 0.3
# ids at or above this are static roadside objects, not vehicles
STATIC_ID_BASE = 1_000_000
GROUND_ID = -2


@dataclass(frozen=True)
class LidarSpec:
    mount: Pose = Pose()
    mount_height: float = 2.4
    channels: int = 64
    vertical_fov: tuple = (-25.0, 5.0)
    azimuth_step: float = 0.4
    max_range: float = 100.0
    range_noise_std: float = 0.0
    sensor_id: str = "lidar"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        lo, hi = self.vertical_fov
        if not lo < hi:
            raise ValueError("vertical_fov must be (min, max) with min < max")
        if not 0 < self.azimuth_step <= 360:
            raise ValueError("azimuth_step must be in (0, 360]")
        if self.mount_height <= 0:
            raise ValueError("mount_height must be > 0")
        if self.range_noise_std < 0:
            raise ValueError("range_noise_std must be >= 0")

    def at(self, pose: Pose, sensor_id: str | None = None) -> "LidarSpec":
        return LidarSpec(
            pose, self.mount_height, self.channels, tuple(self.vertical_fov),
            self.azimuth_step, self.max_range, self.range_noise_std,
            sensor_id if sensor_id is not None else self.sensor_id,
        )


@dataclass(frozen=True)
class SceneBox:
    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float
    id: int

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("box dimensions must be > 0")

    @property
    def is_static(self) -> bool:
        return self.id >= STATIC_ID_BASE

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = []
        for sx in (-0.5, 0.5):
            for sy in (-0.5, 0.5):
                for sz in (-0.5, 0.5):
                    lx, ly = sx * self.length, sy * self.width
                    out.append((self.cx + c * lx - s * ly, self.cy + s * lx + c * ly,
                                self.cz + sz * self.height))
        return np.array(out)


@dataclass(frozen=True)
class SceneSnapshot:
    boxes: tuple = field(default_factory=tuple)
    ground_z: float = 0.0

    def vehicles(self) -> list:
        return [b for b in self.boxes if not b.is_static]

    def with_static(self, static: Iterable[SceneBox]) -> "SceneSnapshot":
        return SceneSnapshot(tuple(self.boxes) + tuple(static), self.ground_z)


@lru_cache(maxsize=16)
def _ray_grid(channels: int, fov: tuple, step: float) -> tuple:
    elev = np.radians(np.linspace(fov[0], fov[1], channels))
    n_az = max(1, int(round(360.0 / step)))
    az = np.radians(np.arange(n_az) * step)
    e, a = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    d = d.reshape(-1, 3)
    d.flags.writeable = False
    az.flags.writeable = False
    return d, az


def local_directions(spec: LidarSpec) -> np.ndarray:
    """Unit ray directions in the sensor frame, channel-major."""
    return _ray_grid(spec.channels, tuple(spec.vertical_fov), spec.azimuth_step)[0]


def azimuths(spec: LidarSpec) -> np.ndarray:
    """Azimuth of each ray column in radians."""
    return _ray_grid(spec.channels, tuple(spec.vertical_fov), spec.azimuth_step)[1]


def _box_array(boxes: Sequence[SceneBox], origin: np.ndarray, max_range: float):
    rows, ids = [], []
    for b in boxes:
        reach = 0.5 * math.sqrt(b.length ** 2 + b.width ** 2 + b.height ** 2)
        if math.dist((b.cx, b.cy, b.cz), origin) - reach > max_range:
            continue
        rows.append((b.cx, b.cy, b.cz, 0.5 * b.length, 0.5 * b.width, 0.5 * b.height,
                     math.cos(b.yaw), math.sin(b.yaw)))
        ids.append(b.id)
    return np.array(rows, dtype=np.float64).reshape(-1, 8), np.array(ids, dtype=np.int64)


def cast_frame(spec: LidarSpec, scene: SceneSnapshot, exclude_ids=(), seed: int | None = None,
               return_ids: bool = False):
    """Cast every (channel, azimuth) ray and keep the nearest hit within range.

    Points are returned in the sensor's local frame. Boxes whose id is in
    ``exclude_ids`` are ignored (the carrier vehicle of an on-board sensor).
    With ``return_ids`` the per-point hit id is also returned; ground hits get
    ``GROUND_ID``.
    """
    origin = sensor_origin(spec.mount, spec.mount_height)
    rot = pose_rotation(spec.mount)
    d_local = local_directions(spec)
    az = azimuths(spec)
    d_global = d_local @ rot.T
    excl = set(exclude_ids)
    boxes = [b for b in scene.boxes if b.id not in excl]
    arr, ids = _box_array(boxes, origin, spec.max_range)
    indptr, cols = box_columns(origin, rot, az, arr)
    t, hit = kernels.cast_grid(origin, d_global, len(az), indptr, cols, arr,
                               float(scene.ground_z), float(spec.max_range))
    keep = hit != NO_HIT
    t = t[keep]
    hit = hit[keep]
    d = d_local[keep]
    if spec.range_noise_std > 0 and len(t):
        rng = np.random.default_rng(seed)
        t = np.clip(t + rng.normal(0.0, spec.range_noise_std, size=t.shape), 0.0, spec.max_range)
    pts = np.empty((len(t), 4))
    pts[:, :3] = d * t[:, None]
    is_ground = hit == GROUND_HIT
    pts[:, 3] = np.where(is_ground, GROUND_INTENSITY, BOX_INTENSITY)
    frame = SensorFrame(spec.mount, spec.mount_height, PointCloud(pts, spec.sensor_id), spec.sensor_id)
    if not return_ids:
        return frame
    hit_ids = np.where(is_ground, GROUND_ID, ids[np.where(is_ground, 0, hit)] if len(ids) else GROUND_ID)
    return frame, hit_ids.astype(np.int64)
