"""Rigid transforms and raw point-cloud merging across LiDAR sensors.

Frames
------
Global frame is right-handed, x east, y north, z up. A sensor's origin sits at
``(pose.x, pose.y, pose.z + mount_height)``; its local axes are the global axes
rotated by ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``. A point observed in the sensor's
local frame maps to global as ``R @ p + origin``.

Merging maps every non-ego cloud into the ego sensor's local frame with
``p' = R_rel @ p + T_rel`` where ``R_rel`` comes from the yaw/pitch/roll
differences and ``T_rel`` is the other sensor's origin expressed in the ego frame.

Three translation conventions are available:

``"corrected"`` (default)
    ``T = Rz(-yaw_ego) @ (other - ego)``. Exact whenever the ego sensor is level
    (pitch = roll = 0), for any pose of the other sensor.
``"literal"``
    The published planar formula. It equals the corrected one applied to
    ``(dx, -dy)``, i.e. a y-flipped frame, and does not round-trip in a
    right-handed world. Kept for comparison only.
``"se3"``
    Exact relative transform ``R_ego^T R_other``, ``R_ego^T (o_other - o_ego)``
    for arbitrary ego attitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CONVENTIONS = ("corrected", "literal", "se3")


def wrap_angle(a: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value: {v!r}")


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        _check_finite(self.x, self.y, self.z, self.yaw, self.pitch, self.roll)
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, wrap_angle(float(getattr(self, name))))
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def is_level(self) -> bool:
        return self.pitch == 0.0 and self.roll == 0.0


class PointCloud:
    """Immutable (N, 4) array of ``x y z intensity`` tagged with a frame id."""

    __slots__ = ("points", "frame_id")

    def __init__(self, points, frame_id: str):
        if not frame_id:
            raise ValueError("frame_id must be nonempty")
        arr = np.array(points, dtype=np.float64, copy=True)
        if arr.size == 0:
            arr = np.zeros((0, 4))
        if arr.ndim != 2 or arr.shape[1] not in (3, 4):
            raise ValueError(f"points must be (N, 3) or (N, 4), got {arr.shape}")
        if arr.shape[1] == 3:
            arr = np.hstack([arr, np.ones((arr.shape[0], 1))])
        if not np.all(np.isfinite(arr)):
            raise ValueError("point coordinates must be finite")
        arr.flags.writeable = False
        self.points = arr
        self.frame_id = frame_id

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.points[mask_or_index], self.frame_id)

    def __repr__(self) -> str:
        return f"PointCloud(frame_id={self.frame_id!r}, n={len(self)})"


@dataclass(frozen=True)
class SensorFrame:
    pose: Pose
    mount_height: float
    cloud: PointCloud
    sensor_id: str = field(default="")

    def __post_init__(self):
        _check_finite(self.mount_height)
        if self.mount_height <= 0:
            raise ValueError("mount_height must be > 0")

    @property
    def origin(self) -> np.ndarray:
        return sensor_origin(self.pose, self.mount_height)


@dataclass(frozen=True)
class Transform4:
    """Homogeneous rotation plus a translation added after rotating."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        r = self.rotation[:3, :3]
        return xyz @ r.T + self.translation[:3]

    def apply_point(self, p: Sequence[float]) -> np.ndarray:
        h = np.array([p[0], p[1], p[2], 1.0])
        return (self.rotation @ h)[:3] + self.translation[:3]


def sensor_origin(pose: Pose, mount_height: float) -> np.ndarray:
    return np.array([pose.x, pose.y, pose.z + mount_height])


def rotation_matrix(d_yaw: float, d_pitch: float, d_roll: float) -> np.ndarray:
    """4x4 homogeneous ``Rz(d_yaw) @ Ry(d_pitch) @ Rx(d_roll)``."""
    _check_finite(d_yaw, d_pitch, d_roll)
    cy, sy = math.cos(d_yaw), math.sin(d_yaw)
    cp, sp = math.cos(d_pitch), math.sin(d_pitch)
    cr, sr = math.cos(d_roll), math.sin(d_roll)
    rz = np.array([[cy, -sy, 0, 0], [sy, cy, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    ry = np.array([[cp, 0, sp, 0], [0, 1, 0, 0], [-sp, 0, cp, 0], [0, 0, 0, 1]], dtype=float)
    rx = np.array([[1, 0, 0, 0], [0, cr, -sr, 0], [0, sr, cr, 0], [0, 0, 0, 1]], dtype=float)
    return rz @ ry @ rx


def pose_rotation(pose: Pose) -> np.ndarray:
    """3x3 local-to-global rotation of a pose."""
    return rotation_matrix(pose.yaw, pose.pitch, pose.roll)[:3, :3]


def translation_vector(
    ego: Pose, other: Pose, height_diff: float, convention: str = "corrected"
) -> np.ndarray:
    """Offset ``(dx, dy, dz, 0)`` of the other sensor seen from the ego sensor.

    ``height_diff`` is ``other.mount_height - ego.mount_height``.
    """
    _check_finite(height_diff)
    ddx = other.x - ego.x
    ddy = other.y - ego.y
    ddz = other.z - ego.z
    a = -ego.yaw
    if convention == "corrected":
        dx = ddx * math.cos(a) - ddy * math.sin(a)
        dy = ddx * math.sin(a) + ddy * math.cos(a)
        dz = ddz + height_diff
    elif convention == "literal":
        dx = ddx * math.cos(a) + ddy * math.sin(a)
        dy = -(ddx * -math.sin(a) + ddy * math.cos(a))
        dz = ddz + height_diff
    elif convention == "se3":
        d = np.array([ddx, ddy, ddz + height_diff])
        dx, dy, dz = pose_rotation(ego).T @ d
    else:
        raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    return np.array([dx, dy, dz, 0.0])


def relative_transform(
    ego: Pose,
    ego_height: float,
    other: Pose,
    other_height: float,
    convention: str = "corrected",
) -> Transform4:
    """Transform taking points in ``other``'s local frame into ``ego``'s frame."""
    if convention == "se3":
        r3 = pose_rotation(ego).T @ pose_rotation(other)
        rot = np.eye(4)
        rot[:3, :3] = r3
    else:
        rot = rotation_matrix(
            wrap_angle(other.yaw - ego.yaw),
            wrap_angle(other.pitch - ego.pitch),
            wrap_angle(other.roll - ego.roll),
        )
    t = translation_vector(ego, other, other_height - ego_height, convention)
    return Transform4(rot, t)


def local_to_global(pose: Pose, mount_height: float) -> Transform4:
    rot = np.eye(4)
    rot[:3, :3] = pose_rotation(pose)
    t = np.zeros(4)
    t[:3] = sensor_origin(pose, mount_height)
    return Transform4(rot, t)


def global_to_local(pose: Pose, mount_height: float) -> Transform4:
    r = pose_rotation(pose).T
    rot = np.eye(4)
    rot[:3, :3] = r
    t = np.zeros(4)
    t[:3] = -(r @ sensor_origin(pose, mount_height))
    return Transform4(rot, t)


def merge_clouds(
    ego: SensorFrame,
    others: Iterable[SensorFrame],
    convention: str = "corrected",
) -> PointCloud:
    """Append every other cloud, mapped into the ego frame, after the ego points."""
    others = list(others)
    if not others:
        return ego.cloud
    if any(o is ego for o in others):
        raise ValueError("ego frame must not appear in others")
    blocks = [ego.cloud.points]
    for o in others:
        if len(o.cloud) == 0:
            continue
        tf = relative_transform(ego.pose, ego.mount_height, o.pose, o.mount_height, convention)
        moved = np.empty_like(o.cloud.points)
        moved[:, :3] = tf.apply(o.cloud.xyz)
        moved[:, 3] = o.cloud.intensity
        blocks.append(moved)
    return PointCloud(np.vstack(blocks), ego.cloud.frame_id)


# -- point-cloud text format -------------------------------------------------

_PRECISION = 9


def format_cloud(cloud: PointCloud) -> str:
    lines = [f"# frame={cloud.frame_id} n={len(cloud)}"]
    fmt = f"{{:.{_PRECISION}f}}"
    for row in cloud.points:
        lines.append(" ".join(fmt.format(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_cloud(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing '# frame=<id> n=<count>' header")
    fields = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    if "frame" not in fields or "n" not in fields:
        raise ValueError(f"malformed header: {lines[0]!r}")
    n = int(fields["n"])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"header says n={n} but found {len(body)} points")
    pts = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64)
    if n and pts.shape[1] != 4:
        raise ValueError("each point line needs 'x y z intensity'")
    return PointCloud(pts.reshape(n, 4), fields["frame"])


def write_cloud(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_cloud(cloud))


def read_cloud(path) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        return parse_cloud(fh.read())
