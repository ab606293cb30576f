"""Road geometry for the two-phase T-intersection.

The main street runs east-west through the origin with ``main_lanes`` lanes per
direction; the side street joins from the south with one northbound lane whose
traffic turns left (onto westbound) or right (onto eastbound). Traffic keeps
right, lane 0 is the outermost lane of an approach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lidar_sim import STATIC_ID_BASE, SceneBox


@dataclass(frozen=True)
class Lane:
    """A lane centerline through its stop bar.

    ``dist_to_bar`` is positive upstream of the bar and negative past it.
    """

    id: str
    index: int
    approach: str
    direction: tuple
    stop_bar: tuple
    upstream_length: float
    downstream_extent: float
    width: float

    def coords(self, x, y):
        ux, uy = self.direction
        rx = np.asarray(x, dtype=float) - self.stop_bar[0]
        ry = np.asarray(y, dtype=float) - self.stop_bar[1]
        along = rx * ux + ry * uy
        lateral = -rx * uy + ry * ux
        return -along, lateral

    def point_at(self, dist_to_bar: float) -> tuple:
        ux, uy = self.direction
        return (self.stop_bar[0] - ux * dist_to_bar, self.stop_bar[1] - uy * dist_to_bar)

    @property
    def heading(self) -> float:
        return math.atan2(self.direction[1], self.direction[0])


@dataclass(frozen=True)
class Approach:
    id: str
    heading: float
    lanes: int
    stop_bar: tuple
    upstream_length: float
    downstream_length: float


def _bezier_table(p0, d0, p3, d3, n=400):
    span = math.dist(p0, p3)
    k = 0.55 * span
    p0 = np.asarray(p0, float)
    p3 = np.asarray(p3, float)
    p1 = p0 + k * np.asarray(d0)
    p2 = p3 - k * np.asarray(d3)
    u = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - u) ** 3) * p0 + 3 * ((1 - u) ** 2) * u * p1 + 3 * (1 - u) * u * u * p2 + (u ** 3) * p3
    der = 3 * ((1 - u) ** 2) * (p1 - p0) + 6 * (1 - u) * u * (p2 - p1) + 3 * u * u * (p3 - p2)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    heading = np.unwrap(np.arctan2(der[:, 1], der[:, 0]))
    return s, pts[:, 0], pts[:, 1], heading


class Path:
    """Approach lane, intersection connector, exit lane, parameterised by arclength.

    ``s`` is the position of the vehicle front; the stop bar is at
    ``s = stop_s`` and the vehicle leaves the network at ``s = total``.
    """

    def __init__(self, lane: Lane, movement: str, exit_lane: Lane, exit_start: tuple,
                 downstream_length: float):
        self.lane = lane
        self.movement = movement
        self.exit_lane = exit_lane
        self.id = f"{lane.id}{movement}"
        self.stop_s = lane.upstream_length
        self._start = lane.point_at(lane.upstream_length)
        self._exit_start = exit_start
        self._exit_dir = exit_lane.direction
        bar = lane.stop_bar
        if movement == "T":
            self._table = None
            conn_len = math.dist(bar, exit_start)
        else:
            self._table = _bezier_table(bar, lane.direction, exit_start, exit_lane.direction)
            conn_len = float(self._table[0][-1])
        self.conn_len = conn_len
        self.conn_end = self.stop_s + conn_len
        self.total = self.conn_end + downstream_length

    def position(self, s: float):
        """``(x, y, heading)`` of the point at arclength ``s``."""
        lane = self.lane
        if s <= self.stop_s or (self._table is None and s <= self.conn_end):
            ux, uy = lane.direction
            return (self._start[0] + ux * s, self._start[1] + uy * s, lane.heading)
        if s <= self.conn_end:
            ts, tx, ty, th = self._table
            q = s - self.stop_s
            return (float(np.interp(q, ts, tx)), float(np.interp(q, ts, ty)), float(np.interp(q, ts, th)))
        ux, uy = self._exit_dir
        e = s - self.conn_end
        return (self._exit_start[0] + ux * e, self._exit_start[1] + uy * e, self.exit_lane.heading)

    def dist_to_bar(self, s: float) -> float:
        return self.stop_s - s


@dataclass
class RoadNetwork:
    lane_width: float = 3.5
    main_lanes: int = 2
    upstream_length: float = 250.0
    downstream_length: float = 120.0
    stop_setback: float = 1.5
    intersection_center: tuple = (0.0, 0.0)
    approaches: list = field(default_factory=list)
    lanes: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    geofence_polygon: list = field(default_factory=list)
    phase_incoming: dict = field(default_factory=dict)
    phase_outgoing: dict = field(default_factory=dict)
    lane_phase: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.upstream_length < 200.0:
            raise ValueError("upstream_length must be >= 200 m")
        if self.downstream_length < 100.0:
            raise ValueError("downstream_length must be >= 100 m")
        if self.main_lanes < 1:
            raise ValueError("main_lanes must be >= 1")
        if not self.lanes:
            self._build()

    @property
    def main_half_width(self) -> float:
        return self.main_lanes * self.lane_width

    @property
    def side_half_width(self) -> float:
        return self.lane_width

    def lane(self, lane_id: str) -> Lane:
        return self._by_id[lane_id]

    def _build(self):
        w = self.lane_width
        up, down = self.upstream_length, self.downstream_length
        mhw, shw = self.main_half_width, self.side_half_width
        bar_x = shw + self.stop_setback
        bar_y = -(mhw + 1.0)
        lanes = []
        for k in range(self.main_lanes):
            y = -(mhw - w / 2 - k * w)
            lanes.append(Lane(f"EB{k}", len(lanes), "EB", (1.0, 0.0), (-bar_x, y), up,
                              2 * bar_x + down, w))
        for k in range(self.main_lanes):
            y = mhw - w / 2 - k * w
            lanes.append(Lane(f"WB{k}", len(lanes), "WB", (-1.0, 0.0), (bar_x, y), up,
                              2 * bar_x + down, w))
        nb = Lane("NB0", len(lanes), "NB", (0.0, 1.0), (w / 2, bar_y), up, -bar_y + mhw, w)
        lanes.append(nb)
        self.lanes = lanes
        self._by_id = {ln.id: ln for ln in lanes}
        self.approaches = [
            Approach("EB", 0.0, self.main_lanes, (-bar_x, -mhw / 2), up, down),
            Approach("WB", math.pi, self.main_lanes, (bar_x, mhw / 2), up, down),
            Approach("NB", math.pi / 2, 1, (0.0, bar_y), up, down),
        ]
        paths = {}
        for ln in lanes[: 2 * self.main_lanes]:
            exit_start = ln.point_at(-2 * bar_x)
            paths[(ln.id, "T")] = Path(ln, "T", ln, exit_start, down)
        eb_outer = self._by_id["EB0"]
        wb_inner = self._by_id[f"WB{self.main_lanes - 1}"]
        paths[("NB0", "R")] = Path(nb, "R", eb_outer, eb_outer.point_at(-2 * bar_x), down)
        paths[("NB0", "L")] = Path(nb, "L", wb_inner, wb_inner.point_at(-2 * bar_x), down)
        self.paths = paths

        ext = bar_x + up
        self.geofence_polygon = [
            (-ext, -mhw), (-shw, -mhw), (-shw, bar_y - up), (shw, bar_y - up),
            (shw, -mhw), (ext, -mhw), (ext, mhw), (-ext, mhw),
        ]
        main_ids = [ln.id for ln in lanes[: 2 * self.main_lanes]]
        self.phase_incoming = {1: main_ids, 2: ["NB0"]}
        self.phase_outgoing = {1: list(main_ids), 2: [eb_outer.id, wb_inner.id]}
        self.lane_phase = {lid: p for p, ids in self.phase_incoming.items() for lid in ids}

    def in_region(self, path: Path, s_center: float, upstream: float = 200.0,
                  downstream: float = 100.0) -> bool:
        """Whether a vehicle centre lies in the control region of its path."""
        d = path.stop_s - s_center
        return -downstream <= d <= upstream


def point_in_polygon(x: float, y: float, polygon, tol: float = 1e-9) -> bool:
    """Even-odd rule; points on an edge count as inside."""
    n = len(polygon)
    inside = False
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        # on-segment test
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if abs(cross) <= tol * max(1.0, math.hypot(x2 - x1, y2 - y1)):
            if min(x1, x2) - tol <= x <= max(x1, x2) + tol and min(y1, y2) - tol <= y <= max(y1, y2) + tol:
                return True
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def polygon_is_simple(polygon) -> bool:
    def seg_cross(p1, p2, p3, p4):
        def orient(a, b, c):
            v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            return (v > 0) - (v < 0)
        o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
        o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
        return o1 * o2 < 0 and o3 * o4 < 0

    n = len(polygon)
    edges = [(polygon[i], polygon[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if seg_cross(*edges[i], *edges[j]):
                return False
    return True


def roadside_objects(network: RoadNetwork, seed: int = 7, spacing: float = 12.0) -> list:
    """Static off-road clutter (hedges, bins, kiosks, buildings) along every street.

    Deterministic in ``seed``; part of the map rather than of a run.
    """
    rng = np.random.default_rng(seed)
    mhw, shw = network.main_half_width, network.side_half_width
    ext = network.upstream_length + shw + network.stop_setback
    side_end = network.upstream_length + mhw
    out = []

    def draw():
        if rng.random() < 0.12:
            ln, wd, ht = rng.uniform(12, 25), rng.uniform(8, 15), rng.uniform(6, 12)
            off = rng.uniform(14, 22)
        else:
            ln, wd, ht = rng.uniform(0.8, 4.0), rng.uniform(0.6, 2.4), rng.uniform(0.5, 1.9)
            off = rng.uniform(2.0, 9.0)
        return ln, wd, ht, off

    x = -ext
    while x < ext:
        for side in (-1, 1):
            ln, wd, ht, off = draw()
            cy = side * (mhw + off + wd / 2)
            cx = x + rng.uniform(-3, 3)
            if side < 0 and abs(cx) < shw + off + ln / 2 + 2:
                continue
            out.append(SceneBox(cx, cy, ht / 2, ln, wd, ht, 0.0, STATIC_ID_BASE + len(out)))
        x += spacing
    y = -(mhw + 10.0)
    while y > -side_end:
        for side in (-1, 1):
            ln, wd, ht, off = draw()
            cx = side * (shw + off + wd / 2)
            # long objects must not reach onto the main street
            cy = min(y + rng.uniform(-3, 3), -(mhw + 2.0 + ln / 2))
            out.append(SceneBox(cx, cy, ht / 2, ln, wd, ht, math.pi / 2, STATIC_ID_BASE + len(out)))
        y -= spacing
    return out
