"""Command-line batch runner: ``mfdba synth|run|ablate|audit|eval``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure
(initialization failure, solver breakdown, failed audit).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (MANIFEST_NAME, ConfigError, DatasetSpec, RunConfig, load_dataset_spec,
                     load_run_config, make_provider, parse_value)
from .evaluation import AlignmentError, align, trace_report
from .formats import FormatError, StampedTrajectory, read_tum, write_euroc_imu, write_tum
from .solver import FactorSet, RankDeficientError, SolverDivergedError, StructuralError
from .system import InitializationError

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "MFDBA_OUT"

log = logging.getLogger("mfdba")

PLOT_SCRIPT = """\
# gnuplot -persist plot.gp
set terminal pngcairo size 900,420
set output 'trajectory.png'
set multiplot layout 1,2
set title 'trajectory (x-z)'
set xlabel 'x [m]'; set ylabel 'z [m]'
set size ratio -1
plot 'trajectory.dat' u 2:4 w l t 'ground truth', \\
     '' u 5:7 w l t 'VIO', \\
     '' u 8:10 w l t 'VI-SLAM'
set title 'confidence per iteration'
set size noratio
set xlabel 'iteration'; set ylabel 'mean confidence'
plot 'confidence.dat' u 1:2 w lp t 'w_r', '' u 1:3 w lp t 'w_f', '' u 1:4 w lp t 'w_f / w_r'
unset multiplot
"""


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "mfdba_out"))


def _out_dir(arg, name: str) -> Path:
    p = Path(arg) if arg else output_root() / name
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# synth


def write_dataset(spec: DatasetSpec, out: Path) -> Path:
    """Manifest, IMU stream, ground truth and depth grids; byte-deterministic."""
    world = spec.world()
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).write_text(spec.dumps(), encoding="utf-8")
    imu = world.imu
    write_euroc_imu(out / "imu.csv", imu.samples)
    write_tum(out / "groundtruth.txt", StampedTrajectory(world.times, world.cam_poses))
    bias = np.column_stack([imu.samples.t, imu.gyro_bias, imu.accel_bias])
    np.savetxt(out / "imu_bias.txt", bias, fmt="%.17g",
               header="t bg_x bg_y bg_z ba_x ba_y ba_z")
    np.save(out / "inverse_depth.npy",
            np.stack([world.inverse_depth(k) for k in range(world.n_frames)]))
    return out


def cmd_synth(args) -> int:
    spec = load_dataset_spec(args.spec, seed=args.seed, overrides=args.set)
    out = _out_dir(args.out, f"synth-{spec.seed}")
    write_dataset(spec, out)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.dataset:
        overrides.append(f"run.dataset={args.dataset}")
    if args.mode:
        overrides.append(f"run.mode={args.mode}")
    if args.provider:
        overrides.append(f"run.provider={args.provider}")
    for flag in ("reproj", "featmetric", "inertial"):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"run.{flag}={'true' if v else 'false'}")
    return load_run_config(args.config, overrides)


def _ate(est: StampedTrajectory, ref: StampedTrajectory) -> dict:
    return {m: align(est, ref, m).rmse for m in ("se3", "sim3")}


def _trace_rows(solves):
    rows = []
    for n, s in enumerate(solves):
        if s.result is None:
            continue
        for r in s.result.trace:
            rows.append((n, s.label, s.frame, r))
    return rows


def write_run(res, world, out: Path) -> dict:
    ref = StampedTrajectory(world.times, world.cam_poses)
    vio = StampedTrajectory(res.times, res.vio)
    write_tum(out / "vio.txt", vio)
    write_tum(out / "groundtruth.txt", ref)
    summary = {"frames": int(len(res.times)), "keyframes": [int(k) for k in res.keyframes],
               "ate": {"vio": _ate(vio, ref)}}
    traj = [res.times, ref.positions, vio.positions]
    if res.slam is not None:
        slam = StampedTrajectory(res.times, res.slam)
        write_tum(out / "slam.txt", slam)
        summary["ate"]["slam"] = _ate(slam, ref)
        traj.append(slam.positions)
    else:
        traj.append(vio.positions)
    if res.init is not None:
        summary["init"] = {"scale": float(res.init.scale),
                           "gravity": [float(x) for x in res.init.gravity],
                           "gyro_bias": [float(x) for x in res.init.gyro_bias]}

    with open(out / "traces.csv", "w", encoding="utf-8") as fh:
        fh.write("solve,label,frame,iteration,cost_reproj,cost_featmetric,cost_inertial,"
                 "mean_w_r,mean_w_f,w_u,lambda,accepted\n")
        for n, label, frame, r in _trace_rows(res.solves):
            fh.write(",".join([str(n), label, str(frame), str(r.iteration)] +
                              [repr(float(x)) for x in (r.cost_reproj, r.cost_featmetric,
                                                        r.cost_inertial, r.mean_w_r, r.mean_w_f,
                                                        r.w_u, r.lam)] +
                              [str(int(r.accepted))]) + "\n")
    # the longest windowed solve stands for the confidence-vs-iteration plot
    windows = [s for s in res.solves if s.result is not None and s.label != "track"]
    if windows:
        longest = max(windows, key=lambda s: len(s.result.trace))
        rep = trace_report(longest.result.trace)
        (out / "trace.csv").write_text(rep.csv(), encoding="utf-8")
        conf = np.column_stack([[r.iteration for r in rep.rows], rep.mean_w_r, rep.mean_w_f,
                                np.nan_to_num(rep.ratio)])
        np.savetxt(out / "confidence.dat", conf, fmt="%.10g",
                   header="iteration mean_w_r mean_w_f ratio")
        summary["trace"] = dict(rep.summary(), solve=longest.label, frame=int(longest.frame))
    np.savetxt(out / "trajectory.dat", np.column_stack(traj), fmt="%.10g",
               header="t gt_x gt_y gt_z vio_x vio_y vio_z slam_x slam_y slam_z")
    (out / "plot.gp").write_text(PLOT_SCRIPT, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return summary


def execute(cfg: RunConfig, out: Path | None = None):
    """Run one configuration; returns ``(result, world)`` and writes ``out`` if given."""
    from .system import run_pipeline
    if not cfg.dataset:
        raise ConfigError("no dataset given (run.dataset or --dataset)")
    spec = load_dataset_spec(cfg.dataset)
    world = spec.world()
    calib = world.calib() if cfg.inertial else None
    res = run_pipeline(world, cfg.pipeline_config(), cfg.provider_instance(), calib)
    if out is not None:
        (out / "config.ini").write_text(cfg.dumps(), encoding="utf-8")
        write_run(res, world, out)
    return res, world


def cmd_run(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out or cfg.output or None, "run")
    execute(cfg, out)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    print(json.dumps(summary["ate"], indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def _matrix_rows(path, base_params=None):
    """Rows from a matrix file: one ``[row NAME]`` section per configuration."""
    import configparser
    from .benchmark import AblationRow
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {p}")
    try:
        cp.read_string(p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    rows = []
    for sec in cp.sections():
        if not sec.startswith("row "):
            raise ConfigError(f"{p}: section [{sec}] must be named [row NAME]")
        vals = dict(cp[sec])
        flags = {}
        for k in ("reproj", "featmetric", "inertial", "outlier_oracle"):
            flags[k] = parse_value(vals.pop(k, "true" if k in ("reproj", "outlier_oracle")
                                            else "false"), True, f"{sec}.{k}")
        name = vals.pop("provider", "scheduled")
        params = {k.split(".", 1)[1]: v for k, v in vals.items() if k.startswith("param.")}
        extra = [k for k in vals if not k.startswith("param.")]
        if extra:
            raise ConfigError(f"[{sec}] unknown keys: {', '.join(extra)}")
        try:
            factors = FactorSet(flags["reproj"], flags["featmetric"], flags["inertial"])
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
        make_provider(name, params, flags["outlier_oracle"])      # validate now
        rows.append(AblationRow(sec[4:].strip(), factors,
                                lambda n=name, q=params, o=flags["outlier_oracle"]:
                                make_provider(n, q, o)))
    if not rows:
        raise ConfigError(f"{p}: no [row NAME] sections")
    return rows


def cmd_ablate(args) -> int:
    from .benchmark import BENCH_CONFIG, ablate, default_rows, loop_suite, noisy_suite
    base = BENCH_CONFIG
    if args.config:
        base = load_run_config(args.config, args.set).pipeline
    elif args.set:
        base = load_run_config(None, args.set).pipeline
    if args.dataset:
        worlds = [load_dataset_spec(d).world() for d in args.dataset]
    else:
        make = {"noisy": noisy_suite, "loop": loop_suite}[args.suite]
        worlds = make(args.sequences)
    rows = _matrix_rows(args.matrix) if args.matrix else default_rows()
    if args.rows:
        wanted = args.rows.split(",")
        known = {r.name for r in rows}
        bad = [w for w in wanted if w not in known]
        if bad:
            raise ConfigError(f"unknown rows: {', '.join(bad)}")
        rows = [r for r in rows if r.name in wanted]
    table = ablate(worlds, rows, base, metric=args.metric)
    out = _out_dir(args.out, "ablate")
    (out / "ablation.csv").write_text(table.csv(), encoding="utf-8")
    errors = {k: v for k, v in table.errors.items() if v}
    (out / "ablation.json").write_text(json.dumps(
        {"rows": table.rows, "ate": table.ate, "errors": errors, "seconds": table.seconds},
        indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    sys.stdout.write(table.csv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit / eval


def cmd_audit(args) -> int:
    from .audit import run_audits
    try:
        report = run_audits(args.only.split(",") if args.only else None, quick=args.quick)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_eval(args) -> int:
    est, ref = read_tum(args.estimate), read_tum(args.reference)
    modes = ("se3", "sim3") if args.mode == "both" else (args.mode,)
    out = {}
    for m in modes:
        res = align(est, ref, m)
        out[m] = {"ate": res.rmse, "scale": res.scale, "poses": int(len(res.residuals))}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--mode", choices=("mono", "stereo", "rgbd"))
    p.add_argument("--provider", choices=("uniform", "oracle", "scheduled", "adaptive"))
    for flag, text in (("reproj", "re-projection"), ("featmetric", "feature-metric"),
                       ("inertial", "inertial")):
        g = p.add_mutually_exclusive_group()
        g.add_argument(f"--{flag}", dest=flag, action="store_true", default=None,
                       help=f"enable the {text} factor")
        g.add_argument(f"--no-{flag}", dest=flag, action="store_false",
                       help=f"disable the {text} factor")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mfdba",
        description="Dense visual-inertial bundle adjustment experiments on synthetic data.",
        epilog=f"Outputs default to ${OUT_ENV}/<command> (or ./mfdba_out/<command>).")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a spec file")
    p.add_argument("spec", help="dataset spec / manifest (INI)")
    p.add_argument("--seed", type=int, help="master seed (overrides [dataset] seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a spec value (repeatable)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run VIO and global BA on a dataset")
    p.add_argument("config", nargs="?", help="run configuration (INI)")
    p.add_argument("--dataset", help="dataset directory or manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable; flags win over the file)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="factor / confidence ablation table")
    p.add_argument("--matrix", help="matrix file with [row NAME] sections "
                                    "(default: the built-in seven rows)")
    p.add_argument("--config", help="run configuration supplying pipeline/window/lm settings")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--dataset", action="append", help="dataset (repeatable); default: a suite")
    p.add_argument("--suite", choices=("noisy", "loop"), default="noisy")
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--rows", help="comma-separated subset of row names")
    p.add_argument("--metric", choices=("se3", "sim3"), default="sim3")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("audit", help="numerical self-checks; non-zero exit on failure")
    p.add_argument("--only", help="comma-separated audits: jacobians,preintegration,schur,gauge")
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("eval", help="ATE between two TUM trajectories")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--mode", choices=("se3", "sim3", "both"), default="both")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, AlignmentError, StructuralError, FileNotFoundError) as exc:
        print(f"mfdba {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InitializationError as exc:
        print(f"mfdba {args.command}: initialization failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RankDeficientError, SolverDivergedError) as exc:
        print(f"mfdba {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
