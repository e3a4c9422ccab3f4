"""Command-line entry point: simulate, train, odometry, eval.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_override, describe_keys, load_config, set_value
from .evaluation import KITTI_LENGTHS, align_to_first, map_quality, match_times, relative_errors, transform_points
from .pipeline import (MODES, NumericalError, build_map, load_model, load_train_state, new_train_state, run_odometry,
                       save_train_state, train, write_map, write_trajectory)
from .simulator import (TRAJECTORY_KINDS, SequenceFormatError, read_csv_table, read_sequence, simulate,
                        write_sequence)

logger = logging.getLogger("rasio")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliIOError(OSError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _prepare(args) -> RunConfig:
    cfg = load_config(args.config)
    for a in args.set or []:
        apply_override(cfg, a)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("threads must be at least 1")
        cfg.threads = args.threads
    return cfg


# -- subcommands -------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _prepare(args)
    set_value(cfg, "simulate", "kind", args.kind)
    set_value(cfg, "simulate", "duration", args.duration)
    radar = cfg.build("radar")
    out = Path(args.out)
    kinds = TRAJECTORY_KINDS if args.suite else (None,)
    for i, kind in enumerate(kinds):
        extra = {} if kind is None else {"kind": kind}
        sim = cfg.build("simulate", **extra)
        seed = cfg.seed * 10 + i if args.suite else cfg.seed
        seq = simulate(sim, radar, seed=seed, threads=cfg.threads)
        target = out / sim.kind if args.suite else out
        try:
            write_sequence(seq, target)
        except OSError as exc:
            raise CliIOError(f"cannot write {target}: {exc}") from None
        print(f"{target}: {len(seq)} frames, {len(seq.gt_map)} static landmarks, "
              f"{seq.frames[-1].t - seq.frames[0].t:.2f} s, {len(seq.imu)} IMU samples")
    return EXIT_OK


def _read_sequences(dirs) -> list:
    seqs = []
    for d in dirs:
        seqs.append(read_sequence(d))
    return seqs


def cmd_train(args) -> int:
    cfg = _prepare(args)
    set_value(cfg, "train", "epochs", args.epochs)
    set_value(cfg, "train", "lr", args.lr)
    set_value(cfg, "train", "pairs_per_epoch", args.pairs_per_epoch)
    if "seed" not in cfg.sections.get("train", {}):
        set_value(cfg, "train", "seed", cfg.seed)
    tcfg = cfg.build("train")
    seqs = _read_sequences(args.data)
    out = Path(args.out)
    loss_log = Path(args.loss_log) if args.loss_log else out.parent / "loss.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.resume and out.exists():
        state = load_train_state(out)
        remaining = max(tcfg.epochs - state.epoch, 0)
        logger.info("resuming at epoch %d, %d epochs to go", state.epoch, remaining)
    else:
        state = new_train_state(tcfg)
        remaining = tcfg.epochs
        if loss_log.exists():
            loss_log.unlink()
    if remaining:
        train(seqs, state=state, checkpoint=out, loss_log=loss_log, epochs=remaining)
    else:
        save_train_state(state, out)
    last = state.history[-1] if state.history else None
    msg = f"{out}: epoch {state.epoch}"
    if last is not None:
        msg += f", total loss {last[4]:.6g}"
    print(msg)
    return EXIT_OK


def cmd_odometry(args) -> int:
    cfg = _prepare(args)
    set_value(cfg, "odometry", "mode", args.mode)
    if "seed" not in cfg.sections.get("odometry", {}):
        set_value(cfg, "odometry", "seed", cfg.seed)
    set_value(cfg, "odometry", "threads", cfg.threads)
    ocfg = cfg.build("odometry")
    mcfg = cfg.build("map")
    model = None
    if ocfg.mode != "imu_only":
        if not args.checkpoint:
            raise ConfigError(f"mode {ocfg.mode!r} needs --checkpoint")
        model = load_model(args.checkpoint)
    seq = read_sequence(args.seq)
    traj = run_odometry(seq, model, ocfg)
    points = build_map(traj, voxel=mcfg.voxel or None)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory(out / "traj.csv", traj)
        write_map(out / "map.csv", points)
    except OSError as exc:
        raise CliIOError(f"cannot write to {out}: {exc}") from None
    print(f"{out}: {len(traj)} poses, {len(points)} map points, {int(traj.flags.sum())} IMU-only fallbacks")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    if args.kitti:
        set_value(cfg, "eval", "kitti_lengths", True)
    ecfg = cfg.build("eval")
    lengths = KITTI_LENGTHS if ecfg.kitti_lengths else ecfg.segment_lengths
    est = read_csv_table(args.est, ["t", "x", "y", "yaw"])
    gt = read_csv_table(args.gt, ["t", "x", "y", "yaw"])
    if len(est) == 0 or len(gt) == 0:
        raise SequenceFormatError("trajectory files must contain at least one pose")
    try:
        idx = match_times(est[:, 0], gt[:, 0])
    except ValueError as exc:
        raise SequenceFormatError(f"{args.est}: {exc}") from None
    gt_m = gt[idx, 1:4]
    est_w = align_to_first(est[:, 1:4], gt_m[0])
    odo = relative_errors(est_w, gt_m, lengths)
    report = {"odometry": odo.to_dict(), "segment_lengths": [float(x) for x in lengths],
              "n_poses": int(len(est))}
    points = None
    gmap = None
    if args.gt_map:
        gmap = read_csv_table(args.gt_map, ["x", "y"])
    if args.map:
        points = transform_points(read_csv_table(args.map, ["x", "y"]), gt_m[0])
        if gmap is None:
            raise ConfigError("--map needs --gt-map")
        mq = map_quality(points, gmap, ecfg.clutter_threshold)
        d = mq.to_dict()
        for k in ("chamfer", "hausdorff"):
            if not np.isfinite(d[k]):
                d[k] = None
        d["rpcdl_definition"] = "fraction of map points within threshold of ground truth"
        report["map"] = d
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", report)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["length", "translation_pct", "rotation_deg_per_100m", "segments"])
            for L in sorted(odo.per_length):
                r = odo.per_length[L]
                w.writerow([_fmt(L), _fmt(r["translation_pct"]), _fmt(r["rotation_deg_per_100m"]), r["segments"]])
        if args.plot:
            from .plotting import plot_errors, plot_trajectory
            if odo.per_length:
                plot_errors(odo.per_length, out / "errors.svg")
            plot_trajectory(est_w, gt_m, out / "trajectory.svg", points, gmap)
    except OSError as exc:
        raise CliIOError(f"cannot write to {out}: {exc}") from None
    print(f"translation {odo.translation_pct:.3f} %, rotation {odo.rotation_deg_per_100m:.3f} deg/100m"
          + (f", chamfer {report['map']['chamfer']}" if "map" in report else ""))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = describe_keys() + "\n\nexit codes: 0 ok, 2 config, 3 I/O, 4 numerical failure"
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="rasio", description="Radar-inertial odometry with self-supervised landmarks.",
                                epilog=epilog, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="random seed (overrides config)")
        sp.add_argument("--threads", type=int, help="worker cap (overrides config)")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="write a synthetic sequence", epilog=epilog, formatter_class=fmt)
    common(s)
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--kind", choices=TRAJECTORY_KINDS)
    s.add_argument("--duration", type=float)
    s.add_argument("--suite", action="store_true", help="write the four standard trajectories into OUT/<kind>")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the extractor and bias regressor", epilog=epilog, formatter_class=fmt)
    common(t)
    t.add_argument("--data", nargs="+", required=True, help="sequence directories")
    t.add_argument("--out", required=True, help="checkpoint path (manifest goes to OUT.json)")
    t.add_argument("--loss-log", help="loss CSV (default: loss.csv next to the checkpoint)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--pairs-per-epoch", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT up to the configured epoch count")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("odometry", help="estimate trajectory and map", epilog=epilog, formatter_class=fmt)
    common(o)
    o.add_argument("--seq", required=True, help="sequence directory")
    o.add_argument("--checkpoint", help="trained checkpoint (not needed for imu_only)")
    o.add_argument("--mode", choices=MODES)
    o.add_argument("--out", required=True, help="output directory for traj.csv and map.csv")
    o.set_defaults(func=cmd_odometry)

    e = sub.add_parser("eval", help="score a trajectory and map", epilog=epilog, formatter_class=fmt)
    common(e)
    e.add_argument("--est", required=True, help="estimated traj.csv")
    e.add_argument("--gt", required=True, help="ground-truth gt_poses.csv")
    e.add_argument("--map", help="estimated map.csv")
    e.add_argument("--gt-map", help="ground-truth gt_map.csv")
    e.add_argument("--out", required=True, help="output directory for report.json and errors.csv")
    e.add_argument("--kitti", action="store_true", help="use 100-800 m segment lengths")
    e.add_argument("--plot", action="store_true", help="also write SVG figures")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, SequenceFormatError, CliIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
