"""Closed-loop scenario runs, parameter sweeps and offline evaluation.

A run steps the traffic simulation at ``dt``, produces vehicle observations
every ``perception_period`` (cooperative perception, connected-vehicle
self-reports or ground truth, depending on the mode), and lets the max-pressure
controller decide every ``decision_period``. Everything that the metrics need
is written to the scenario log, and the metrics are always computed from the
log records, so ``evaluate`` on a saved log reproduces the run's report.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Iterable, Optional

import numpy as np

from .config import ConfigError, ScenarioConfig, from_dict
from .control import (ControllerConfig, ControllerState, ObservationBuffer, decide, phases_for,
                      pressures)
from .detection import Box3D, Detection, DetectorConfig, detect, format_detections
from .fusion import (FusedVehicleObservation, format_observations, fuse, locate,
                     to_global)
from .geometry import Pose, merge_clouds
from .lidar_sim import STATIC_ID_BASE, LidarSpec, cast_frame
from .metrics import (VIEWS, MetricsReport, ap40_frames, avg_delay, e_cvpr,
                      ecvpr_frames_csv, ecvpr_histogram_csv, mean_std, report_csv,
                      REPORT_COLUMNS)
from .network import RoadNetwork, point_in_polygon, roadside_objects
from .traffic_sim import TrafficSim, vehicle_box

LOG_FORMAT = 2
OUTPUT_ENV = "COOPSENSE_OUTPUT_DIR"
_R = 4  # decimals kept for positions in the log


def output_dir(default: str = "coopsense_out") -> FsPath:
    return FsPath(os.environ.get(OUTPUT_ENV) or default)


def _substream_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0])


def build_network(cfg: ScenarioConfig) -> RoadNetwork:
    return RoadNetwork(lane_width=cfg.lane_width, upstream_length=cfg.upstream_length,
                       downstream_length=cfg.downstream_length)


def controller_config(cfg: ScenarioConfig) -> ControllerConfig:
    return ControllerConfig(cfg.min_green, cfg.yellow, cfg.all_red, cfg.decision_period,
                            cfg.staleness, cfg.upstream_window, cfg.downstream_window)


def detector_config(cfg: ScenarioConfig) -> DetectorConfig:
    return DetectorConfig(ransac_distance=cfg.ransac_distance, ransac_iters=cfg.ransac_iters,
                          ransac_passes=cfg.ransac_passes, dbscan_eps=cfg.dbscan_eps,
                          dbscan_min_pts=cfg.dbscan_min_pts)


def _ticks(period: float, dt: float) -> int:
    return max(1, int(round(period / dt)))


class Perception:
    """Cooperative perception: infrastructure and CAV LiDARs, detection, fusion."""

    def __init__(self, cfg: ScenarioConfig, network: RoadNetwork):
        self.cfg = cfg
        self.network = network
        base = LidarSpec(channels=cfg.lidar_channels,
                         vertical_fov=(cfg.lidar_vfov_min, cfg.lidar_vfov_max),
                         azimuth_step=cfg.lidar_azimuth_step, max_range=cfg.lidar_max_range,
                         range_noise_std=cfg.lidar_range_noise)
        self.base = base
        self.infra = [
            dataclasses.replace(base, mount=Pose(x, y, 0.0, yaw), mount_height=h,
                                sensor_id=f"infra{i}")
            for i, (x, y, yaw, h) in enumerate(cfg.infra_sensors)
        ]
        self.cav_base = dataclasses.replace(base, mount_height=cfg.cav_mount_height)
        self.static = roadside_objects(network, cfg.clutter_seed) if cfg.roadside_clutter else []
        self.detector = detector_config(cfg)

    def sensors(self, world: TrafficSim) -> list:
        """``(spec, excluded box ids)`` for every active sensor, infrastructure first."""
        out = [(s, ()) for s in self.infra]
        for v in world.vehicles:
            if v.kind == "CAV":
                box = vehicle_box(v)
                pose = Pose(box.cx, box.cy, 0.0, box.yaw)
                out.append((dataclasses.replace(self.cav_base, mount=pose, sensor_id=f"cav{v.id}"),
                            (v.id,)))
        return out

    def sense(self, world: TrafficSim, tick: int):
        cfg = self.cfg
        scene = world.ground_truth_boxes().with_static(self.static)
        active = self.sensors(world)
        cast = [cast_frame(spec, scene, excl, seed=_substream_seed(cfg.seed, 4, tick, i),
                           return_ids=True)
                for i, (spec, excl) in enumerate(active)]
        frames = [f for f, _ in cast]
        hit_ids = np.concatenate([ids for _, ids in cast])
        ids, counts = np.unique(hit_ids[(hit_ids >= 0) & (hit_ids < STATIC_ID_BASE)],
                                return_counts=True)
        returns = [[int(i), int(c)] for i, c in zip(ids, counts)]
        det_seed = _substream_seed(cfg.seed, 3, tick)
        raw: list = []
        if cfg.detection_input == "merged":
            ego = frames[0]
            cloud = merge_clouds(ego, frames[1:], cfg.merge_convention)
            labels = np.repeat(np.array([f.sensor_id for f in frames]),
                               [len(f.cloud) for f in frames])
            local = detect(cloud, self.detector, det_seed, point_source=labels)
            raw = to_global(local, ego.pose, ego.mount_height)
        else:
            for i, f in enumerate(frames):
                local = detect(f.cloud, self.detector, _substream_seed(det_seed, i),
                               source=(f.sensor_id,))
                raw.extend(to_global(local, f.pose, f.mount_height))
        fused = fuse(raw, self.network, cfg.dedupe_threshold)
        sensors = [[f.sensor_id, round(float(f.origin[0]), _R), round(float(f.origin[1]), _R),
                    round(float(f.origin[2]), _R)] for f in frames]
        return sensors, raw, fused, returns


def _box_record(d: Detection) -> list:
    b = d.box
    return [round(b.cx, _R), round(b.cy, _R), round(b.cz, _R), round(b.ex, _R), round(b.ey, _R),
            round(b.ez, _R), round(b.yaw, 6), d.score, "+".join(d.source)]


def _obs_record(o: FusedVehicleObservation) -> list:
    return [o.lane_id, round(o.dist_to_bar, _R), round(o.x, _R), round(o.y, _R)]


def _observe_truth(world: TrafficSim, network: RoadNetwork) -> list:
    out = []
    for v in world.vehicles:
        box = vehicle_box(v)
        hit = locate(box.cx, box.cy, network)
        if hit is not None:
            out.append(FusedVehicleObservation(box.cx, box.cy, hit[0].id, hit[1], ("truth",), v.id))
    return out


def _observe_cv(world: TrafficSim, network: RoadNetwork, cfg: ScenarioConfig, tick: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2, tick)))
    out = []
    for v in world.vehicles:
        if v.kind != "CV":
            continue
        box = vehicle_box(v)
        dx, dy = rng.normal(0.0, cfg.cv_position_noise, size=2)
        x, y = box.cx + dx, box.cy + dy
        if not point_in_polygon(x, y, network.geofence_polygon):
            continue
        hit = locate(x, y, network)
        if hit is not None:
            out.append(FusedVehicleObservation(x, y, hit[0].id, hit[1], (f"cv{v.id}",), v.id))
    return out


@dataclass
class RunResult:
    config: ScenarioConfig
    log_lines: list
    report: MetricsReport
    detection_text: str = ""
    observation_text: str = ""

    @property
    def log_text(self) -> str:
        return "\n".join(self.log_lines) + "\n"


def _dump(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def run(cfg: ScenarioConfig, progress: Optional[Callable[[int, int], None]] = None) -> RunResult:
    """Simulate one scenario in closed loop and evaluate it from its own log."""
    cfg.validate()
    network = build_network(cfg)
    volumes = {"EB": cfg.volume_main, "WB": cfg.volume_main, "NB": cfg.volume_side}
    world = TrafficSim(network, volumes, cfg.cav_rate, cfg.cv_rate, cfg.seed, cfg.dt,
                       left_ratio=cfg.left_ratio)
    ctrl = controller_config(cfg)
    phases = phases_for(network, ctrl)
    state = ControllerState()
    buffer = ObservationBuffer(cfg.staleness)
    perception = Perception(cfg, network) if cfg.mode == "COOP" else None

    n_ticks = int(round((cfg.warmup + cfg.duration) / cfg.dt))
    every_obs = _ticks(cfg.perception_period, cfg.dt)
    every_dec = _ticks(cfg.decision_period, cfg.dt)
    header = {"type": "header", "format": LOG_FORMAT, "config": cfg.to_dict()}
    lines = [_dump(header)]
    records = []
    det_chunks, obs_chunks = [], []
    for k in range(n_ticks):
        n_events = len(world.events)
        n_finished = len(world.finished)
        world.step(state.signal)
        tick = k + 1
        t = round(tick * cfg.dt, 6)
        rec: dict = {"k": tick, "t": t}
        frame = None
        if tick % every_obs == 0:
            if cfg.mode == "COOP":
                sensors, raw, fused, returns = perception.sense(world, tick)
                obs = fused.observations
                frame = {"sensors": sensors, "raw": [_box_record(d) for d in raw],
                         "post": [_box_record(d) for d in fused.deduped], "returns": returns}
                det_chunks.append(format_detections(tick, raw))
            elif cfg.mode == "CV":
                obs = _observe_cv(world, network, cfg, tick)
                frame = {"sensors": []}
            else:
                obs = _observe_truth(world, network)
                frame = {"sensors": []}
            frame["obs"] = [_obs_record(o) for o in obs]
            obs_chunks.append(format_observations(tick, obs))
            buffer.push(t, obs)
        press = pressures(phases, buffer.current(t)) if tick % every_dec == 0 else None
        state = decide(state, press, cfg.dt, ctrl)
        sig = state.signal
        rec["sig"] = [sig.active_phase, sig.interval.value, round(sig.elapsed, 6)]
        veh = []
        for v in world.vehicles:
            box = vehicle_box(v)
            region = network.in_region(v.path, v.s_center, cfg.upstream_window,
                                       cfg.downstream_window)
            veh.append([v.id, v.kind, v.path.id, round(v.s, _R), round(v.v, _R),
                        round(box.cx, _R), round(box.cy, _R), round(box.yaw, 6),
                        round(v.length, _R), round(v.width, _R), round(v.height, _R), int(region)])
        rec["veh"] = veh
        ev = []
        for e in world.events[n_events:]:
            if e[0] == "spawn":
                ev.append(["spawn", e[1], round(e[2], 6)])
        for v in world.finished[n_finished:]:
            ev.append(["exit", v.id, round(v.spawn_time, 6), round(v.exit_time, 6),
                       round(world.free_flow_time(v.path), 6)])
        rec["ev"] = ev
        if frame is not None:
            rec["frame"] = frame
        line = _dump(rec)
        lines.append(line)
        records.append(json.loads(line))
        if progress is not None:
            progress(tick, n_ticks)
    report = evaluate(records, cfg)
    return RunResult(cfg, lines, report, "".join(det_chunks), "".join(obs_chunks))


# -- evaluation ----------------------------------------------------------------

def _gt_box(v: list) -> Box3D:
    return Box3D(v[5], v[6], 0.5 * v[10], v[8], v[9], v[10], v[7])


def _pred(r: list) -> tuple:
    return Box3D(*r[:7]), r[7]


def evaluate(records: Iterable[dict], cfg: ScenarioConfig) -> MetricsReport:
    """Metrics from per-tick log records (the header line excluded)."""
    warm_tick = int(round(cfg.warmup / cfg.dt))
    reach = cfg.lidar_max_range
    ap_frames = {"raw": [], "post": []}
    report = MetricsReport()
    delays = []
    for rec in records:
        for e in rec["ev"]:
            if e[0] == "exit" and e[2] >= cfg.warmup - 1e-9:
                delays.append((e[2], e[3], e[4]))
        frame = rec.get("frame")
        if frame is None or rec["k"] < warm_tick:
            continue
        truth = [(v[5], v[6]) for v in rec["veh"] if v[11]]
        obs = [FusedVehicleObservation(o[2], o[3], o[0], o[1]) for o in frame["obs"]]
        report.ecvpr_frames.append((rec["k"], rec["t"], e_cvpr(obs, truth, cfg.ecvpr_radius)))
        if cfg.mode == "COOP":
            if cfg.ap_min_points > 0:
                # only vehicles some LiDAR actually returned points from can be detected
                seen = {i for i, n in frame["returns"] if n >= cfg.ap_min_points}
                gts = [_gt_box(v) for v in rec["veh"] if v[0] in seen]
            else:
                sensors = frame["sensors"]
                gts = [_gt_box(v) for v in rec["veh"]
                       if any(math.hypot(v[5] - s[1], v[6] - s[2]) <= reach for s in sensors)]
            for stage in ("raw", "post"):
                ap_frames[stage].append(([_pred(r) for r in frame[stage]], gts))
    if cfg.mode == "COOP":
        for stage, frames in ap_frames.items():
            for thr in (0.1, 0.01):
                for view in VIEWS:
                    report.ap[(stage, view, thr)] = ap40_frames(frames, thr, view)
    report.avg_delay_s = avg_delay(delays)
    report.n_exited = len(delays)
    return report


def parse_log(text: str) -> tuple:
    """``(config, records)`` from scenario log text."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("empty scenario log")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed log header: {exc}") from None
    if header.get("type") != "header" or "config" not in header:
        raise ConfigError("scenario log lacks a header record")
    if header.get("format") != LOG_FORMAT:
        raise ConfigError(f"unsupported log format {header.get('format')!r}")
    cfg = from_dict(header["config"])
    return cfg, [json.loads(ln) for ln in lines[1:]]


def evaluate_log(text: str) -> MetricsReport:
    cfg, records = parse_log(text)
    return evaluate(records, cfg)


# -- outputs -------------------------------------------------------------------

def write_run(result: RunResult, out: FsPath) -> dict:
    """Write log, metrics and per-frame files into ``out``; returns their paths."""
    out = FsPath(out)
    out.mkdir(parents=True, exist_ok=True)
    rep = result.report
    paths = {
        "log": out / "scenario_log.ndjson",
        "metrics": out / "metrics.csv",
        "ecvpr_frames": out / "ecvpr_frames.csv",
        "ecvpr_hist": out / "ecvpr_hist.csv",
        "observations": out / "observations.txt",
    }
    paths["log"].write_text(result.log_text)
    write_report(rep, out)
    paths["observations"].write_text(result.observation_text)
    if result.config.mode == "COOP":
        paths["detections"] = out / "detections.txt"
        paths["detections"].write_text(result.detection_text)
    return paths


def write_report(rep: MetricsReport, out: FsPath) -> None:
    out = FsPath(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report_csv([rep.row()]))
    (out / "ecvpr_frames.csv").write_text(ecvpr_frames_csv(rep.ecvpr_frames))
    (out / "ecvpr_hist.csv").write_text(ecvpr_histogram_csv(rep.ecvpr_values))


# -- sweeps --------------------------------------------------------------------

def parse_grid(spec: str) -> dict:
    """``"cav_rate=0,0.01;seed=1,2"`` to ``{"cav_rate": [0.0, 0.01], "seed": [1, 2]}``."""
    grid: dict = {}
    for part in (spec or "").split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid entry needs key=v1,v2,...: {part!r}")
        key, vals = part.split("=", 1)
        key = key.strip()
        items = [v.strip() for v in vals.split(",") if v.strip()]
        if not items:
            raise ConfigError(f"grid entry {key!r} has no values")
        grid[key] = [_grid_value(v) for v in items]
    return grid


def _grid_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    return v


def grid_cells(grid: dict) -> list:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class SweepResult:
    keys: list
    runs: list = field(default_factory=list)     # dict per (cell, seed)
    summary: list = field(default_factory=list)  # dict per cell


def _sweep_job(args):
    base_dict, params, out = args
    cfg = from_dict({**base_dict, **params})
    result = run(cfg)
    if out is not None:
        write_run(result, FsPath(out))
    return result.report.row()


def sweep(base: ScenarioConfig, grid: dict, seeds: int = 1, jobs: int = 1,
          out: Optional[FsPath] = None) -> SweepResult:
    """Run every grid cell for ``seeds`` consecutive seeds; an empty grid is one cell."""
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    cells = grid_cells(grid)
    keys = list(grid)
    seed_key = "seed" in grid
    jobs_args, labels = [], []
    for ci, cell in enumerate(cells):
        base_seed = cell.get("seed", base.seed)
        for si in range(1 if seed_key else seeds):
            params = {**cell, "seed": base_seed + si}
            from_dict({**base.to_dict(), **params})  # fail fast on bad cells
            sub = None if out is None else FsPath(out) / f"cell{ci:03d}_seed{params['seed']}"
            jobs_args.append((base.to_dict(), params, None if sub is None else str(sub)))
            labels.append((ci, params))
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_job, jobs_args))
    else:
        rows = [_sweep_job(a) for a in jobs_args]
    result = SweepResult(keys)
    by_cell: dict = {}
    for (ci, params), row in zip(labels, rows):
        entry = {**{k: params[k] for k in keys}, "seed": params["seed"], **row}
        result.runs.append(entry)
        by_cell.setdefault(ci, []).append(row)
    for ci, cell in enumerate(cells):
        summ = {k: cell[k] for k in keys}
        summ["n_runs"] = len(by_cell[ci])
        for col in REPORT_COLUMNS:
            m, s = mean_std(r.get(col) for r in by_cell[ci])
            summ[f"{col}_mean"] = m
            summ[f"{col}_std"] = s
        result.summary.append(summ)
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def sweep_csvs(res: SweepResult) -> tuple:
    """``(runs_csv, summary_csv)`` text."""
    run_cols = res.keys + (["seed"] if "seed" not in res.keys else []) + list(REPORT_COLUMNS)
    runs = [",".join(run_cols)]
    for r in res.runs:
        runs.append(",".join(_fmt(r.get(c)) for c in run_cols))
    sum_cols = res.keys + ["n_runs"] + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std")]
    summ = [",".join(sum_cols)]
    for r in res.summary:
        summ.append(",".join(_fmt(r.get(c)) for c in sum_cols))
    return "\n".join(runs) + "\n", "\n".join(summ) + "\n"


def format_table(res: SweepResult, metric: str = "ecvpr", scale: float = 100.0) -> str:
    """One ``mean (std)`` cell per grid cell, the layout used for penetration-rate tables."""
    head, body = [], []
    for r in res.summary:
        head.append(" ".join(f"{k}={r[k]}" for k in res.keys) or "base")
        if metric == "ecvpr":
            # per-frame spread within runs, averaged over seeds
            m, s = r.get("ecvpr_mean_mean"), r.get("ecvpr_std_mean")
        else:
            m, s = r.get(f"{metric}_mean"), r.get(f"{metric}_std")
        body.append("--" if m is None else f"{m * scale:.2f} ({s * scale:.2f})")
    w = [max(len(a), len(b)) for a, b in zip(head, body)]
    return (" | ".join(a.ljust(n) for a, n in zip(head, w)) + "\n"
            + " | ".join(b.ljust(n) for b, n in zip(body, w)) + "\n")
