"""Max-pressure signal control with minimum green, yellow and all-red intervals."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

from .traffic_sim import Interval, SignalState

_EPS = 1e-9


@dataclass(frozen=True)
class PhaseDefinition:
    phase_id: int
    incoming: tuple
    outgoing: tuple
    upstream_window: float = 200.0
    downstream_window: float = 100.0


@dataclass(frozen=True)
class ControllerConfig:
    min_green: float = 5.0
    yellow: float = 4.0
    all_red: float = 1.0
    decision_period: float = 1.0
    staleness: float = 1.0
    upstream_window: float = 200.0
    downstream_window: float = 100.0

    def __post_init__(self):
        if self.min_green < 0 or self.yellow <= 0 or self.all_red < 0:
            raise ValueError("timing parameters must be non-negative (yellow > 0)")
        if self.decision_period <= 0:
            raise ValueError("decision_period must be > 0")


@dataclass(frozen=True)
class ControllerState:
    signal: SignalState = SignalState()
    target: Optional[int] = None


def phases_for(network, cfg: ControllerConfig = ControllerConfig()) -> list:
    """Phase definitions of the T-intersection template."""
    return [
        PhaseDefinition(pid, tuple(network.phase_incoming[pid]), tuple(network.phase_outgoing[pid]),
                        cfg.upstream_window, cfg.downstream_window)
        for pid in sorted(network.phase_incoming)
    ]


def pressure(phase: PhaseDefinition, observations: Sequence) -> int:
    """Vehicles queued on the phase's inbound lanes minus those just past it."""
    inc = set(phase.incoming)
    out = set(phase.outgoing)
    n_in = n_out = 0
    for ob in observations:
        d = ob.dist_to_bar
        if ob.lane_id in inc and 0.0 <= d <= phase.upstream_window:
            n_in += 1
        if ob.lane_id in out and -phase.downstream_window <= d < 0.0:
            n_out += 1
    return n_in - n_out


def pressures(phases: Sequence[PhaseDefinition], observations: Sequence) -> dict:
    return {ph.phase_id: pressure(ph, observations) for ph in phases}


def decide(state: ControllerState, phase_pressures: Optional[Mapping[int, float]], dt: float,
           cfg: ControllerConfig = ControllerConfig()) -> ControllerState:
    """Advance interval timing by ``dt`` and, given pressures, consider a switch.

    Pass ``None`` for ``phase_pressures`` on ticks where no decision is due.
    Ties keep the active phase; among tied challengers the lowest id wins.
    """
    sig = state.signal
    elapsed = round(sig.elapsed + dt, 9)
    target = state.target
    if sig.interval is Interval.YELLOW and elapsed >= cfg.yellow - _EPS:
        if cfg.all_red > 0:
            sig = SignalState(sig.active_phase, Interval.ALL_RED, 0.0)
        else:
            sig = SignalState(target, Interval.GREEN, 0.0)
            target = None
    elif sig.interval is Interval.ALL_RED and elapsed >= cfg.all_red - _EPS:
        sig = SignalState(target, Interval.GREEN, 0.0)
        target = None
    else:
        sig = replace(sig, elapsed=elapsed)

    if (phase_pressures is not None and sig.interval is Interval.GREEN
            and sig.elapsed >= cfg.min_green - _EPS):
        active = sig.active_phase
        best = max(phase_pressures.values())
        if phase_pressures.get(active, float("-inf")) < best:
            target = min(pid for pid, p in phase_pressures.items() if p == best)
            sig = SignalState(active, Interval.YELLOW, 0.0)
    return ControllerState(sig, target)


class ObservationBuffer:
    """Latest fused frame with a staleness cutoff."""

    def __init__(self, staleness: float = 1.0):
        self.staleness = staleness
        self._time: Optional[float] = None
        self._obs: list = []

    def push(self, t: float, observations: Sequence) -> None:
        self._time = t
        self._obs = list(observations)

    def current(self, t: float) -> list:
        if self._time is None or t - self._time > self.staleness + _EPS:
            return []
        return self._obs


def check_timing(signal_trace: Sequence[SignalState], dt: float,
                 cfg: ControllerConfig = ControllerConfig()) -> list:
    """Violations of interval durations and ordering in a per-tick signal trace.

    The last interval, and the first one when the trace joins it midway
    (nonzero elapsed on the first entry), are only checked for ordering.
    """
    problems = []
    runs = []
    for k, sig in enumerate(signal_trace):
        key = (sig.interval, sig.active_phase)
        if runs and runs[-1][0] == key:
            runs[-1][2] += 1
        else:
            runs.append([key, k, 1])
    allowed = {Interval.GREEN: Interval.YELLOW, Interval.YELLOW: Interval.ALL_RED,
               Interval.ALL_RED: Interval.GREEN}
    if cfg.all_red == 0:
        allowed[Interval.YELLOW] = Interval.GREEN
    for i, ((interval, phase), start, n) in enumerate(runs):
        dur = n * dt
        complete = i + 1 < len(runs)
        if i == 0 and signal_trace[0].elapsed > _EPS:
            complete = False
        if i + 1 < len(runs):
            nxt_interval, nxt_phase = runs[i + 1][0]
            if allowed[interval] is not nxt_interval:
                problems.append(f"tick {start + n}: {interval.value}->{nxt_interval.value}")
            if interval is Interval.GREEN and nxt_phase != phase:
                problems.append(f"tick {start + n}: phase changed leaving green")
            if nxt_interval is Interval.GREEN and nxt_phase == phase:
                problems.append(f"tick {start + n}: green returned to the same phase")
        if complete and interval is Interval.GREEN and dur < cfg.min_green - _EPS:
            problems.append(f"tick {start}: green {dur:.1f}s < min {cfg.min_green}s")
        if complete and interval is Interval.YELLOW and abs(dur - cfg.yellow) > _EPS:
            problems.append(f"tick {start}: yellow {dur:.1f}s")
        if complete and interval is Interval.ALL_RED and abs(dur - cfg.all_red) > _EPS:
            problems.append(f"tick {start}: all-red {dur:.1f}s")
    return problems
