"""Compare the compiled and numpy kernel backends on one perception frame.

Usage: python benchmarks/bench_kernels.py [--warmup-s 120] [--cav-rate 0.05] [--repeat 5]

A traffic world is advanced to a loaded state, then each backend casts every
LiDAR, removes ground, clusters and fuses the same frame. Per-stage medians are
printed along with a check that both backends produce identical output.
"""

from __future__ import annotations

import argparse
import statistics
import time
from contextlib import contextmanager

import numpy as np

from coopsense import _backend, detection, lidar_sim
from coopsense.config import ScenarioConfig
from coopsense.detection import DetectorConfig, dbscan, ransac_ground_removal
from coopsense.geometry import PointCloud
from coopsense.harness import Perception, build_network, controller_config
from coopsense.control import ControllerState, decide
from coopsense.lidar_sim import cast_frame
from coopsense.traffic_sim import TrafficSim


@contextmanager
def use_backend(mod):
    saved = lidar_sim.kernels, detection.kernels
    lidar_sim.kernels = detection.kernels = mod
    try:
        yield
    finally:
        lidar_sim.kernels, detection.kernels = saved


def loaded_world(cfg: ScenarioConfig, seconds: float) -> TrafficSim:
    net = build_network(cfg)
    vol = {"EB": cfg.volume_main, "WB": cfg.volume_main, "NB": cfg.volume_side}
    world = TrafficSim(net, vol, cfg.cav_rate, cfg.cv_rate, seed=cfg.seed)
    state, ccfg = ControllerState(), controller_config(cfg)
    for k in range(int(round(seconds / cfg.dt))):
        # fixed alternation keeps queues present without running perception
        phase = 1 if (k // 300) % 2 == 0 else 2
        state = decide(state, {phase: 1, 3 - phase: 0} if k % 10 == 9 else None, cfg.dt, ccfg)
        world.step(state.signal)
    return world


def timed(fn, repeat):
    out, times = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def bench(world, perception, cloud, repeat):
    scene = world.ground_truth_boxes().with_static(perception.static)
    spec = perception.infra[0]
    det = DetectorConfig()
    frame, t_cast = timed(lambda: cast_frame(spec, scene, seed=0), repeat)
    nonground, t_ransac = timed(lambda: ransac_ground_removal(cloud, det, seed=0), repeat)
    clusters, t_dbscan = timed(lambda: dbscan(nonground, det.dbscan_eps, det.dbscan_min_pts), repeat)
    (_, raw, fused), t_sense = timed(lambda: perception.sense(world, 0), repeat)
    rows = {"cast infra frame": t_cast, "ransac 2 passes": t_ransac,
            "dbscan": t_dbscan, "full perception frame": t_sense}
    result = (frame.cloud.xyz.tobytes(), nonground.xyz.tobytes(),
              [c.tobytes() for c in clusters], [d.box for d in raw], fused.observations)
    return rows, result


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--warmup-s", type=float, default=120.0)
    ap.add_argument("--cav-rate", type=float, default=0.05)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    cfg = ScenarioConfig(cav_rate=args.cav_rate, seed=args.seed)
    world = loaded_world(cfg, args.warmup_s)
    perception = Perception(cfg, build_network(cfg))
    n_sensors = len(perception.sensors(world))
    scene = world.ground_truth_boxes().with_static(perception.static)
    cloud = cast_frame(perception.infra[0], scene, seed=0).cloud
    cloud = PointCloud(np.ascontiguousarray(cloud.xyz), cloud.frame_id)
    print(f"vehicles {len(world.vehicles)}, sensors {n_sensors}, infra points {len(cloud)}")

    backends = _backend.available_backends()
    results, timings = {}, {}
    for name, mod in backends.items():
        with use_backend(mod):
            timings[name], results[name] = bench(world, perception, cloud, args.repeat)

    names = list(backends)
    print(f"{'stage':<24}" + "".join(f"{n:>12}" for n in names)
          + ("     speedup" if len(names) == 2 else ""))
    for stage in timings[names[0]]:
        cells = "".join(f"{timings[n][stage] * 1e3:>10.1f}ms" for n in names)
        extra = ""
        if len(names) == 2:
            extra = f"{timings['python'][stage] / timings['cython'][stage]:>11.1f}x"
        print(f"{stage:<24}{cells}{extra}")
    if len(names) == 2:
        same = results["python"] == results["cython"]
        print(f"outputs identical: {same}")
        return 0 if same else 1
    print("compiled backend not built; only the numpy path was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
