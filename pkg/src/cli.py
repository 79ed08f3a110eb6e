"""
Command-line entry point

    sim  --config F --out DIR [--seed N]
    run  --config F --imu F --scans DIR --out F [--one-pass] [--report F]
         [--dump-config F] [--map-dump F]
    eval --gt F --est F [--config F] [--max-ate X] [--max-time-diff S]

Exit codes: 0 success, 1 operational error, 2 failed --max-ate check.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from colorama import Fore, Style, init

from config import RunConfig
from evaluation import evaluate, print_metrics, read_trajectory, write_trajectory
from imu import read_imu_csv
from odometry import LidarInertialOdometry
from scan import RawScan, read_scan_csv, read_scan_index, scan_file_name
from simulator import generate_dataset

init()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_THRESHOLD = 2


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=handlers,
        force=True,
    )


def load_scans(scan_dir) -> list[RawScan]:
    """Scans listed in scans.csv, in index order"""
    scan_dir = Path(scan_dir)
    index = read_scan_index(scan_dir / "scans.csv")
    return [
        read_scan_csv(scan_dir / scan_file_name(int(row.index)), row.t_start, row.t_end)
        for row in index.itertuples()
    ]


def write_report(records, path, one_pass: bool) -> Path:
    path = Path(path)
    df = pd.DataFrame([r.as_row() for r in records])
    with path.open("w", newline="") as f:
        f.write(f"# solver.one_pass = {'true' if one_pass else 'false'}\n")
        df.to_csv(f, index=False, float_format="%.12g")
    return path


def cmd_sim(args) -> int:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config.sim.seed = args.seed
    summary = generate_dataset(config, args.out)

    print(f"\n{Fore.CYAN}Simulation written to {summary.out_dir}{Style.RESET_ALL}")
    print(f"Preset:            {config.sim.preset} (seed {config.sim.seed})")
    print(f"Duration:          {summary.duration:.2f} s")
    print(f"IMU samples:       {summary.num_imu_samples}")
    print(f"Scans:             {summary.num_scans}")
    print(f"Peak angular rate: {summary.peak_angular_rate:.3f} rad/s")
    print(f"Peak speed:        {summary.peak_speed:.3f} m/s")
    return EXIT_OK


def cmd_run(args) -> int:
    config = RunConfig.load(args.config)
    if args.one_pass:
        config.solver.one_pass = True
    config.validate()
    if args.dump_config:
        Path(args.dump_config).write_text(config.dump())

    imu = read_imu_csv(args.imu)
    scans = load_scans(args.scans)
    logger.info(f"Loaded {len(imu)} IMU samples and {len(scans)} scans")

    odometry = LidarInertialOdometry(config)
    odometry.run(imu, scans)

    write_trajectory(odometry.trajectory(), args.out)
    if args.report:
        write_report(odometry.records, args.report, config.solver.one_pass)
    if args.map_dump:
        odometry.map.dump_csv(args.map_dump)

    mode = "one-pass" if config.solver.one_pass else "iterated"
    degenerate_color = Fore.YELLOW if odometry.degenerate_scans else Fore.GREEN
    print(f"\n{Fore.CYAN}Odometry finished ({mode} undistortion){Style.RESET_ALL}")
    print(f"Poses written:     {len(odometry.states)} -> {args.out}")
    print(f"Degenerate scans:  {degenerate_color}{odometry.degenerate_scans}{Style.RESET_ALL}")
    print(f"Map size:          {len(odometry.map.edges)} edges, {len(odometry.map.planars)} planars")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    max_diff = args.max_time_diff if args.max_time_diff is not None else config.eval.max_time_diff
    gt = read_trajectory(args.gt)
    est = read_trajectory(args.est)
    metrics = evaluate(gt, est, max_diff)
    passed = print_metrics(metrics, args.max_ate)
    return EXIT_OK if passed else EXIT_THRESHOLD


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lio",
        description="Tightly coupled LiDAR-inertial odometry with iterated point-level undistortion",
    )
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-file", default=None, help="also log to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("sim", help="generate a synthetic dataset")
    sim.add_argument("--config", default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=cmd_sim)

    run = commands.add_parser("run", help="run odometry on a dataset")
    run.add_argument("--config", default=None)
    run.add_argument("--imu", required=True)
    run.add_argument("--scans", required=True, help="directory holding scans.csv and scan files")
    run.add_argument("--out", required=True, help="estimated trajectory file")
    run.add_argument("--one-pass", action="store_true", help="freeze undistortion at the initial guess")
    run.add_argument("--report", default=None, help="per-scan report CSV")
    run.add_argument("--dump-config", default=None, help="write the effective config here")
    run.add_argument("--map-dump", default=None, help="write the final map as CSV")
    run.set_defaults(func=cmd_run)

    ev = commands.add_parser("eval", help="compare an estimate with ground truth")
    ev.add_argument("--config", default=None)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--est", required=True)
    ev.add_argument("--max-ate", type=float, default=None, help="fail (exit 2) above this ATE RMSE")
    ev.add_argument("--max-time-diff", type=float, default=None, help="association tolerance (s), overrides eval.max_time_diff")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
