"""Deterministic microscopic simulation of the signalized T-intersection.

Vehicles follow fixed paths (approach lane, connector, exit lane). Speeds
follow a bounded-acceleration rule: accelerate at ``a_max`` toward ``v_free``,
never faster than the safe speed that keeps ``s0`` standstill distance and a
``tau`` headway to the leader or to the stop bar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .lidar_sim import SceneBox, SceneSnapshot
from .network import Path, RoadNetwork

KINDS = ("HV", "CV", "CAV")


class Interval(str, Enum):
    GREEN = "G"
    YELLOW = "Y"
    ALL_RED = "R"


@dataclass(frozen=True)
class SignalState:
    active_phase: int = 1
    interval: Interval = Interval.GREEN
    elapsed: float = 0.0

    def is_green(self, phase: int) -> bool:
        return self.interval is Interval.GREEN and self.active_phase == phase


@dataclass(frozen=True)
class DriverParams:
    a_max: float = 2.0
    b_max: float = 4.5
    s0: float = 2.0
    tau: float = 1.0
    v_free: float = 13.9
    stop_margin: float = 0.5


@dataclass
class Vehicle:
    id: int
    kind: str
    path: Path
    s: float
    v: float
    length: float
    width: float
    height: float
    spawn_time: float
    exit_time: Optional[float] = None

    @property
    def lane_id(self) -> str:
        return self.path.lane.id

    @property
    def rear(self) -> float:
        return self.s - self.length

    @property
    def s_center(self) -> float:
        return self.s - 0.5 * self.length


@dataclass(frozen=True)
class Arrival:
    time: float
    lane_id: str
    kind: str
    movement: str
    length: float
    width: float
    height: float


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def _check_rates(cav_rate: float, cv_rate: float) -> None:
    if not (0.0 <= cav_rate <= 1.0 and 0.0 <= cv_rate <= 1.0):
        raise ValueError("cav_rate and cv_rate must lie in [0, 1]")
    if cav_rate + cv_rate > 1.0 + 1e-12:
        raise ValueError("cav_rate + cv_rate must not exceed 1")


def classify(u: float, cav_rate: float, cv_rate: float) -> str:
    """Kind from one uniform draw.

    Equivalent to CAV w.p. ``cav_rate``, else CV w.p. ``cv_rate/(1-cav_rate)``;
    a shared draw keeps the CAV set nested as ``cav_rate`` grows.
    """
    if u < cav_rate:
        return "CAV"
    if u < cav_rate + cv_rate:
        return "CV"
    return "HV"


class LaneArrivals:
    """Poisson arrivals on one entry lane; attributes come from a second stream."""

    def __init__(self, seed: int, lane_index: int, lane_id: str, rate_vph: float,
                 cav_rate: float, cv_rate: float, left_ratio: float = 0.5,
                 turning: bool = False):
        self.lane_id = lane_id
        self.rate = rate_vph / 3600.0
        self.cav_rate = cav_rate
        self.cv_rate = cv_rate
        self.left_ratio = left_ratio
        self.turning = turning
        self._gaps = _stream(seed, lane_index, 0)
        self._attrs = _stream(seed, lane_index, 1)
        self._next = self._gaps.exponential(1.0 / self.rate) if self.rate > 0 else math.inf

    def pop_until(self, t: float) -> list:
        out = []
        while self._next <= t:
            u = self._attrs.random(5)
            kind = classify(u[0], self.cav_rate, self.cv_rate)
            movement = ("L" if u[1] < self.left_ratio else "R") if self.turning else "T"
            out.append(Arrival(self._next, self.lane_id, kind, movement,
                               4.0 + 1.0 * u[2], 1.7 + 0.3 * u[3], 1.4 + 0.4 * u[4]))
            self._next += self._gaps.exponential(1.0 / self.rate)
        return out


def _lane_rates(network: RoadNetwork, volumes: dict) -> dict:
    rates = {}
    for ln in network.lanes:
        rates[ln.id] = float(volumes.get(ln.approach, 0.0))
        if rates[ln.id] < 0:
            raise ValueError("volumes must be >= 0")
    return rates


def spawn_vehicles(rng_seed: int, volumes: dict, cav_rate: float, cv_rate: float,
                   dt: float, duration: float, network: Optional[RoadNetwork] = None,
                   left_ratio: float = 0.5) -> list:
    """Arrivals over ``[0, duration]`` on every entry lane, ticked at ``dt``.

    ``volumes`` maps approach id (``EB``, ``WB``, ``NB``) to veh/hr/lane. The
    result ignores lane blocking; :class:`TrafficSim` defers blocked entries.
    """
    _check_rates(cav_rate, cv_rate)
    network = network or RoadNetwork()
    rates = _lane_rates(network, volumes)
    procs = [LaneArrivals(rng_seed, ln.index, ln.id, rates[ln.id], cav_rate, cv_rate,
                          left_ratio, ln.approach == "NB") for ln in network.lanes]
    out = []
    n_ticks = int(round(duration / dt))
    for k in range(n_ticks + 1):
        t = k * dt
        for p in procs:
            out.extend(p.pop_until(t))
    return out


def safe_speed(gap_net: float, v: float, v_lead: float, p: DriverParams) -> float:
    """Speed that lets the follower stop behind a leader braking at ``b_max``."""
    return v_lead + (gap_net - v_lead * p.tau) / ((v + v_lead) / (2.0 * p.b_max) + p.tau)


class TrafficSim:
    """Owns the vehicle population; advance with :meth:`step`."""

    def __init__(self, network: RoadNetwork, volumes: dict, cav_rate: float = 0.0,
                 cv_rate: float = 0.0, seed: int = 0, dt: float = 0.1,
                 params: DriverParams = DriverParams(), left_ratio: float = 0.5):
        _check_rates(cav_rate, cv_rate)
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.network = network
        self.params = params
        self.dt = dt
        self.tick = 0
        self.vehicles: list[Vehicle] = []
        self.finished: list[Vehicle] = []
        self.events: list = []
        self._next_id = 0
        rates = _lane_rates(network, volumes)
        self._arrivals = [
            LaneArrivals(seed, ln.index, ln.id, rates[ln.id], cav_rate, cv_rate, left_ratio,
                         ln.approach == "NB")
            for ln in network.lanes
        ]
        self._pending = {ln.id: [] for ln in network.lanes}

    @property
    def time(self) -> float:
        return self.tick * self.dt

    def free_flow_time(self, path: Path) -> float:
        return path.total / self.params.v_free

    # -- internals -----------------------------------------------------------

    def _last_on_lane(self, lane_id: str) -> Optional[Vehicle]:
        last = None
        for v in self.vehicles:
            if v.lane_id == lane_id and (last is None or v.s < last.s):
                last = v
        return last

    def _spawn(self, t: float) -> None:
        p = self.params
        for proc in self._arrivals:
            queue = self._pending[proc.lane_id]
            queue.extend(proc.pop_until(t))
            if not queue:
                continue
            lead = self._last_on_lane(proc.lane_id)
            if lead is None:
                v0 = p.v_free
            else:
                gap_net = lead.rear - p.s0
                if gap_net < 0:
                    continue
                v0 = min(p.v_free, max(0.0, safe_speed(gap_net, p.v_free, lead.v, p)))
            a = queue.pop(0)
            path = self.network.paths[(a.lane_id, a.movement)]
            veh = Vehicle(self._next_id, a.kind, path, 0.0, v0, a.length, a.width, a.height, a.time)
            self._next_id += 1
            self.vehicles.append(veh)
            self.events.append(("spawn", veh.id, a.time))

    def _leaders(self):
        """Map vehicle id to ``[(gap, leader_speed), ...]`` from start-of-step state.

        Approach vehicles also follow the tail of their exit lane, which keeps
        merging movements from entering the intersection onto an occupied lane.
        """
        approach_groups: dict = {}
        exit_groups: dict = {}
        p = self.params
        reach = p.a_max * self.dt
        for v in self.vehicles:
            path = v.path
            if v.rear < path.conn_end:
                approach_groups.setdefault(path.lane.id, []).append(v)
            # vehicles that may cross their bar this tick already count as merging
            if v.s + (v.v + reach) * self.dt > path.stop_s:
                exit_groups.setdefault(path.exit_lane.id, []).append(v)
        out: dict = {}
        tails = {}
        for lane_id, group in exit_groups.items():
            group.sort(key=lambda v: (-(v.s - v.path.conn_end), v.id))
            tails[lane_id] = group[-1]
            for ahead, v in zip(group, group[1:]):
                e_v = v.s - v.path.conn_end
                e_a = ahead.rear - ahead.path.conn_end
                out.setdefault(v.id, []).append((e_a - e_v, ahead.v))
        for group in approach_groups.values():
            group.sort(key=lambda v: (-v.s, v.id))
            for ahead, v in zip(group, group[1:]):
                if v.s <= v.path.stop_s:
                    out.setdefault(v.id, []).append((ahead.rear - v.s, ahead.v))
        for v in self.vehicles:
            if v.s <= v.path.stop_s:
                tail = tails.get(v.path.exit_lane.id)
                if tail is not None and tail is not v:
                    gap = (tail.rear - tail.path.conn_end) - (v.s - v.path.conn_end)
                    out.setdefault(v.id, []).append((gap, tail.v))
        return out

    def step(self, signal: SignalState, dt: Optional[float] = None) -> "TrafficSim":
        """Spawn due arrivals, then move every vehicle one tick under ``signal``."""
        dt = self.dt if dt is None else dt
        if dt <= 0:
            raise ValueError("dt must be > 0")
        p = self.params
        t = self.time
        self._spawn(t)
        leaders = self._leaders()
        lane_phase = self.network.lane_phase
        moved = []
        for v in self.vehicles:
            limit = min(v.v + p.a_max * dt, p.v_free)
            hard = math.inf
            for gap, v_lead in leaders.get(v.id, ()):
                limit = min(limit, safe_speed(gap - p.s0, v.v, v_lead, p))
                hard = min(hard, max(0.0, gap - 0.1) / dt)
            if v.s <= v.path.stop_s and not signal.is_green(lane_phase[v.lane_id]):
                dist = v.path.stop_s - v.s
                if v.v * v.v / (2.0 * p.b_max) <= dist + 1e-9:
                    limit = min(limit, safe_speed(dist - p.stop_margin, v.v, 0.0, p))
                    hard = min(hard, dist / dt)
            v_new = max(0.0, min(limit, hard))
            s_new = v.s + v_new * dt
            if s_new >= v.path.total:
                v.exit_time = t + (v.path.total - v.s) / v_new
                v.s, v.v = s_new, v_new
                self.finished.append(v)
                self.events.append(("exit", v.id, v.exit_time))
                continue
            v.s, v.v = s_new, v_new
            moved.append(v)
        self.vehicles = moved
        self.tick += 1
        return self

    def ground_truth_boxes(self) -> SceneSnapshot:
        return ground_truth_boxes(self)

    def delay(self, v: Vehicle) -> float:
        return (v.exit_time - v.spawn_time) - self.free_flow_time(v.path)


def step(world: TrafficSim, signal: SignalState, dt: float) -> TrafficSim:
    return world.step(signal, dt)


def vehicle_box(v: Vehicle, ground_z: float = 0.0) -> SceneBox:
    x, y, heading = v.path.position(v.s_center)
    return SceneBox(x, y, ground_z + 0.5 * v.height, v.length, v.width, v.height, heading, v.id)


def ground_truth_boxes(world: TrafficSim, ground_z: float = 0.0) -> SceneSnapshot:
    return SceneSnapshot(tuple(vehicle_box(v, ground_z) for v in world.vehicles), ground_z)


def lane_gaps(world: TrafficSim) -> list:
    """Bumper gaps between consecutive vehicles on each approach and exit lane."""
    gaps = []
    groups: dict = {}
    for v in world.vehicles:
        if v.s <= v.path.stop_s:
            groups.setdefault(("in", v.lane_id), []).append((v.s, v.length))
        else:
            e = v.s - v.path.conn_end
            groups.setdefault(("out", v.path.exit_lane.id), []).append((e, v.length))
    for members in groups.values():
        members.sort(reverse=True)
        for (s_a, l_a), (s_b, _) in zip(members, members[1:]):
            gaps.append(s_a - l_a - s_b)
    return gaps
