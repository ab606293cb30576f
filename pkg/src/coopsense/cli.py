"""Command-line entry point: ``coopsense run|sweep|detect|eval``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Outputs go
under ``$COOPSENSE_OUTPUT_DIR`` (default ``./coopsense_out``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from ._backend import BACKEND
from .config import ConfigError, load
from .detection import DetectorConfig, detect, format_detections
from .geometry import read_cloud
from .harness import (OUTPUT_ENV, evaluate_log, format_table, output_dir, parse_grid, run,
                      sweep, sweep_csvs, write_report, write_run)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("coopsense")


def _load_config(path: str, seed):
    cfg = load(path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = output_dir() / (args.name or Path(args.config).stem)
    log.info("run mode=%s seed=%d backend=%s -> %s", cfg.mode, cfg.seed, BACKEND, out)
    result = run(cfg)
    paths = write_run(result, out)
    row = result.report.row()
    for key in ("ap40_bev_01", "ecvpr_mean", "ecvpr_std", "avg_delay_s"):
        v = row[key]
        print(f"{key}: {'absent' if v is None else f'{v:.4f}'}")
    print(f"outputs: {paths['metrics'].parent}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.seed)
    grid = parse_grid(args.grid)
    out = output_dir() / (args.name or f"{Path(args.config).stem}_sweep")
    res = sweep(cfg, grid, seeds=args.seeds, jobs=args.jobs,
                out=out if args.keep_runs else None)
    out.mkdir(parents=True, exist_ok=True)
    runs_csv, summary_csv = sweep_csvs(res)
    (out / "sweep_runs.csv").write_text(runs_csv)
    (out / "sweep_summary.csv").write_text(summary_csv)
    table = format_table(res, "ecvpr") + "\n" + format_table(res, "avg_delay_s", scale=1.0)
    (out / "sweep_table.txt").write_text(table)
    sys.stdout.write(table)
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    try:
        cloud = read_cloud(args.cloud)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read point cloud {args.cloud}: {exc}") from None
    dets = detect(cloud, DetectorConfig(), seed=args.seed or 0, source=(cloud.frame_id,))
    sys.stdout.write(format_detections(args.frame, dets))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        text = Path(args.log).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read log {args.log}: {exc}") from None
    report = evaluate_log(text)
    out = output_dir() / (args.name or f"{Path(args.log).parent.name or 'log'}_eval")
    write_report(report, out)
    sys.stdout.write((out / "metrics.csv").read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--name", help=f"output subdirectory under ${OUTPUT_ENV}")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a parameter grid")
    s.add_argument("config")
    s.add_argument("--grid", default="", help='e.g. "cav_rate=0,0.01,0.02,0.05"')
    s.add_argument("--seeds", type=int, default=1, help="consecutive seeds per cell")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--seed", type=int, help="first seed")
    s.add_argument("--name")
    s.add_argument("--keep-runs", action="store_true", help="also write every run's outputs")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("detect", help="detect vehicles in one point-cloud file")
    d.add_argument("cloud")
    d.add_argument("--seed", type=int)
    d.add_argument("--frame", default="0")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="recompute metrics from a scenario log")
    e.add_argument("log")
    e.add_argument("--name")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map every failure to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
