"""Command-line toolkit over the library.

Each subcommand reads/writes the package's binary formats and leaves one
key=value manifest per run recording resolved settings, file paths, and
per-stage wall-clock timings (the `time_` keys are the only lines that may
differ between reruns; everything else, and every other artifact, is
byte-stable given identical inputs and seeds).

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
failure (NaN loss, degenerate variance, divergence).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EvflowError, FormatError, NumericError
from .events import SensorGeometry, load_events, write_events
from .metrics import (
    CSV_HEADER,
    EvalReport,
    FlowSequence,
    evaluate,
    integrate_trajectory,
    merge_reports,
    read_flow,
    write_flow,
)
from .mocomp import fwl, motion_compensate, rfwl, zero_flow
from .model import load_params, model_forward, save_params
from .render import render_flow_image, write_pgm16
from .representation import (
    BinSpec,
    StreamingBinner,
    build_unified_voxel_grid,
    build_voxel_grid,
    grid_from_emissions,
    read_grid,
    uvg_spec_for_window,
    write_grid,
)
from .simulate import MotionModel, checkerboard_corners, generate_events
from .train import load_train_config, train_toy


class _Stages:
    """Accumulates named wall-clock spans for the manifest."""

    def __init__(self):
        self.spans = {}
        self._t0 = time.perf_counter()

    def __call__(self, name):
        return _Span(self, name)

    def total(self):
        return time.perf_counter() - self._t0


class _Span:
    def __init__(self, stages, name):
        self.stages = stages
        self.name = name

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.stages.spans[self.name] = self.stages.spans.get(self.name, 0.0) + (
            time.perf_counter() - self._start
        )
        return False


def _write_manifest(path, command, fields, stages: _Stages):
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(fields):
        lines.append(f"{key}={fields[key]}")
    for key in sorted(stages.spans):
        lines.append(f"time_{key}_s={stages.spans[key]:.6f}")
    lines.append(f"time_total_s={stages.total():.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------- subcommands


def _cmd_simulate(args):
    stages = _Stages()
    if args.motion == "const":
        motion = MotionModel.constant(args.speed, 0.0)
    else:
        motion = MotionModel.arc((args.width - 1) / 2.0, (args.height - 1) / 2.0, args.speed)
    geometry = SensorGeometry(args.width, args.height)
    pattern = checkerboard_corners(geometry, pitch=args.pattern_pitch)
    with stages("compute"):
        window = generate_events(
            pattern,
            motion,
            args.duration,
            args.rate,
            fractional=args.fractional,
            noise_rate=args.noise_rate,
            seed=args.seed,
        )
    with stages("write"):
        write_events(window, args.out)
    fields = {
        "motion": args.motion,
        "speed": repr(args.speed),
        "duration": repr(args.duration),
        "rate": repr(args.rate),
        "seed": args.seed,
        "width": args.width,
        "height": args.height,
        "pattern_pitch": args.pattern_pitch,
        "noise_rate": repr(args.noise_rate),
        "fractional": args.fractional,
        "n_events": len(window.t),
        "out": args.out,
    }
    _write_manifest(args.manifest or f"{args.out}.manifest", "simulate", fields, stages)
    return 0


def _grid_fields(args, spec, grid):
    return {
        "in": getattr(args, "in"),
        "out": args.out,
        "bins": spec.B,
        "tau": repr(spec.tau),
        "t0": repr(spec.t0),
        "kind": grid.kind,
        "n_events": grid.report.n_events,
        "n_dropped_time": grid.report.n_dropped_time,
        "n_dropped_space": grid.report.n_dropped_space,
    }


def _cmd_voxelize(args):
    stages = _Stages()
    with stages("load"):
        window = load_events(getattr(args, "in"))
    with stages("compute"):
        if args.kind == "classic":
            grid = build_voxel_grid(window, args.bins)
            spec = grid.spec
        else:
            spec = uvg_spec_for_window(window, args.bins, args.tau)
            grid = build_unified_voxel_grid(window, spec)
    with stages("write"):
        write_grid(grid, args.out)
    _write_manifest(args.manifest or f"{args.out}.manifest", "voxelize", _grid_fields(args, spec, grid), stages)
    return 0


def _cmd_stream(args):
    stages = _Stages()
    with stages("load"):
        window = load_events(getattr(args, "in"))
    with stages("compute"):
        spec = uvg_spec_for_window(window, args.bins, args.tau)
        binner = StreamingBinner(spec)
        emissions = []
        for lo in range(0, len(window), args.chunk):
            hi = min(lo + args.chunk, len(window))
            emissions.extend(
                binner.push_chunk(
                    window.t[lo:hi],
                    window.x[lo:hi],
                    window.y[lo:hi],
                    window.p[lo:hi].astype(np.float64),
                )
            )
        emissions.extend(binner.finish())
        grid = grid_from_emissions(emissions, spec, report=binner.report)
    with stages("write"):
        write_grid(grid, args.out)
    fields = _grid_fields(args, spec, grid)
    fields["chunk"] = args.chunk
    _write_manifest(args.manifest or f"{args.out}.manifest", "stream", fields, stages)
    return 0


def _cmd_mocomp(args):
    stages = _Stages()
    with stages("load"):
        window = load_events(args.events)
        flow = read_flow(args.flow)
    with stages("compute"):
        frame = motion_compensate(window, flow, t_ref=args.tref)
        baseline = motion_compensate(window, zero_flow(flow.shape, flow.duration), t_ref=args.tref)
        fwl_val = fwl(window, flow, t_ref=args.tref)
        rfwl_val = rfwl(window, flow, t_ref=args.tref)
    prefix = args.out_prefix
    with stages("write"):
        write_pgm16(frame.counts, f"{prefix}mc.pgm")
        write_pgm16(baseline.counts, f"{prefix}zero.pgm")
        report = "\n".join(
            [
                f"n_total={frame.n_total}",
                f"n_in_flow={frame.n_in}",
                f"n_in_zero={baseline.n_in}",
                f"t_ref={frame.t_ref!r}",
                f"var_flow={frame.variance!r}",
                f"var_zero={baseline.variance!r}",
                f"fwl={fwl_val!r}",
                f"rfwl={rfwl_val!r}",
            ]
        )
        Path(f"{prefix}report.txt").write_text(report + "\n")
    fields = {
        "events": args.events,
        "flow": args.flow,
        "t_ref": repr(frame.t_ref),
        "out_mc": f"{prefix}mc.pgm",
        "out_zero": f"{prefix}zero.pgm",
        "out_report": f"{prefix}report.txt",
        "fwl": repr(fwl_val),
        "rfwl": repr(rfwl_val),
    }
    _write_manifest(args.manifest or f"{prefix}manifest.txt", "mocomp", fields, stages)
    return 0


def _cmd_eval(args):
    stages = _Stages()
    with stages("load"):
        pred = read_flow(args.pred)
        gt = read_flow(args.gt)
    with stages("compute"):
        report = evaluate(pred, gt, ae_convention=args.ae_convention)
    text = f"{CSV_HEADER}\n{report.csv_row()}\n"
    sys.stdout.write(text)
    with stages("write"):
        if args.out:
            Path(args.out).write_text(text)
    fields = {
        "pred": args.pred,
        "gt": args.gt,
        "ae_convention": args.ae_convention,
        "epe": f"{report.epe:.6f}",
        "n_valid": report.n_valid,
    }
    if args.out:
        fields["out"] = args.out
    _write_manifest(args.manifest or f"{args.pred}.eval.manifest", "eval", fields, stages)
    return 0


def _discover_dataset(data_dir):
    root = Path(data_dir)
    if not root.is_dir():
        raise FormatError(f"{data_dir}: not a directory")
    grids = sorted(root.glob("*.evgr"))
    if not grids:
        raise FormatError(f"{data_dir}: no .evgr samples found")
    dataset = []
    for gpath in grids:
        fpath = gpath.with_suffix(".evaf")
        if not fpath.exists():
            raise FormatError(f"{gpath}: missing ground-truth flow {fpath.name}")
        dataset.append((read_grid(gpath), read_flow(fpath)))
    return dataset, [p.name for p in grids]


def _cmd_train(args):
    stages = _Stages()
    with stages("load"):
        config, opts = load_train_config(args.config)
        dataset, names = _discover_dataset(args.data_dir)
    with stages("compute"):
        result = train_toy(
            dataset,
            config,
            seed=args.seed,
            iters=opts["iters"],
            lr=opts["lr"],
            augment=opts["augment"],
            hflip_prob=opts["hflip_prob"],
        )
    with stages("write"):
        save_params(args.out_params, result.params)
        curve_path = f"{args.out_params}.loss.csv"
        with open(curve_path, "w") as fh:
            fh.write("iter,loss\n")
            for it, loss in enumerate(result.loss_curve):
                fh.write(f"{it},{loss:.9f}\n")
    fields = {
        "data_dir": args.data_dir,
        "config": args.config,
        "seed": args.seed,
        "out_params": args.out_params,
        "loss_curve": curve_path,
        "n_samples": len(dataset),
        "samples": ";".join(names),
        "iters": opts["iters"],
        "lr": repr(opts["lr"]),
        "augment": opts["augment"],
        "final_loss": f"{result.loss_curve[-1]:.9f}",
    }
    _write_manifest(args.manifest or f"{args.out_params}.manifest", "train", fields, stages)
    return 0


def _cmd_infer(args):
    stages = _Stages()
    with stages("load"):
        grid = read_grid(args.grid)
        params = load_params(args.params)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with stages("compute"):
        seq, _ = model_forward(grid, params)
    written = []
    with stages("write"):
        for j in range(1, len(seq) + 1):
            path = out_dir / f"flow_{j:04d}.evaf"
            write_flow(seq[j], path)
            written.append(path.name)
            if args.render:
                render_flow_image(seq[j], out_dir / f"flow_{j:04d}.ppm")
    fields = {
        "grid": args.grid,
        "params": args.params,
        "out_dir": args.out_dir,
        "n_flows": len(seq),
        "render": args.render,
        "flows": ";".join(written),
    }
    _write_manifest(args.manifest or str(out_dir / "manifest.txt"), "infer", fields, stages)
    return 0


def _load_flow_dir(flows_dir):
    root = Path(flows_dir)
    if not root.is_dir():
        raise FormatError(f"{flows_dir}: not a directory")
    paths = sorted(root.glob("flow_*.evaf"))
    if not paths:
        raise FormatError(f"{flows_dir}: no flow_NNNN.evaf files found")
    for j, path in enumerate(paths, 1):
        if path.name != f"flow_{j:04d}.evaf":
            raise FormatError(f"{flows_dir}: expected flow_{j:04d}.evaf, found {path.name}")
    flows = [read_flow(p) for p in paths]
    h, w = flows[0].shape
    spec = BinSpec(
        B=len(flows) + 1,
        tau=flows[0].duration,
        t0=0.0,
        geometry=SensorGeometry(w, h),
    )
    return FlowSequence(flows, spec), [p.name for p in paths]


def _read_seeds(path):
    seeds = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'x y', got {line!r}")
            try:
                seeds.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not seeds:
        raise FormatError(f"{path}: no seed points")
    return np.asarray(seeds, np.float64)


def _cmd_trajectory(args):
    stages = _Stages()
    with stages("load"):
        seq, names = _load_flow_dir(args.flows_dir)
        seeds = _read_seeds(args.seeds)
    with stages("compute"):
        tracks = integrate_trajectory(seq, seeds)
    with stages("write"):
        with open(args.out, "w") as fh:
            fh.write("seed,step,t,x,y\n")
            for s in range(tracks.shape[0]):
                for j in range(tracks.shape[1]):
                    t_j = j * seq.spec.tau
                    fh.write(f"{s},{j},{t_j:.9f},{tracks[s, j, 0]:.6f},{tracks[s, j, 1]:.6f}\n")
    fields = {
        "flows_dir": args.flows_dir,
        "seeds": args.seeds,
        "out": args.out,
        "n_seeds": tracks.shape[0],
        "n_steps": tracks.shape[1],
        "flows": ";".join(names),
    }
    _write_manifest(args.manifest or f"{args.out}.manifest", "trajectory", fields, stages)
    return 0


def _parse_metrics_csv(path):
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        return None
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        if len(vals) != 6:
            raise FormatError(f"{path}: malformed metrics row {ln!r}")
        try:
            rows.append(
                EvalReport(
                    epe=float(vals[0]),
                    ae_degrees=float(vals[1]),
                    npe_1px=float(vals[2]),
                    npe_3px=float(vals[3]),
                    outlier_pct=float(vals[4]),
                    n_valid=int(float(vals[5])),
                )
            )
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return rows


def _cmd_report(args):
    stages = _Stages()
    root = Path(args.dir)
    if not root.is_dir():
        raise FormatError(f"{args.dir}: not a directory")
    with stages("load"):
        table = []
        for path in sorted(root.glob("*.csv")):
            rows = _parse_metrics_csv(path)
            if rows:
                table.extend((path.name, row) for row in rows)
    if not table:
        raise FormatError(f"{args.dir}: no metrics CSV files with header {CSV_HEADER!r}")
    with stages("compute"):
        total = merge_reports([row for _, row in table])
    out_lines = [f"file,{CSV_HEADER}"]
    out_lines += [f"{name},{row.csv_row()}" for name, row in table]
    out_lines.append(f"TOTAL,{total.csv_row()}")
    sys.stdout.write("\n".join(out_lines) + "\n")
    fields = {
        "dir": args.dir,
        "n_rows": len(table),
        "total_epe": f"{total.epe:.6f}",
        "total_n_valid": total.n_valid,
    }
    _write_manifest(args.manifest or str(root / "report.manifest"), "report", fields, stages)
    return 0


# ------------------------------------------------------------------ parser


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="evflow",
        description="Anytime event-camera optical flow toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"evflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", default=None, help="override the manifest path")

    p = sub.add_parser("simulate", help="generate synthetic events with analytic ground truth")
    p.add_argument("--motion", choices=("const", "arc"), required=True)
    p.add_argument("--speed", type=float, required=True, help="px/s (const) or rad/s (arc)")
    p.add_argument("--duration", type=float, required=True, help="seconds")
    p.add_argument("--rate", type=float, required=True, help="events per pixel of arc length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--pattern-pitch", type=int, default=8)
    p.add_argument("--noise-rate", type=float, default=0.0, help="noise events per pixel per second")
    p.add_argument("--fractional", action="store_true", help="keep sub-pixel event coordinates")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("voxelize", help="build a voxel grid from an event file")
    p.add_argument("--in", required=True)
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--tau", type=float, default=None, help="bin spacing in seconds (default: span/(B-1))")
    p.add_argument("--kind", choices=("unified", "classic"), default="unified")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("stream", help="build the grid through the streaming bin emitter")
    p.add_argument("--in", required=True)
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--chunk", type=int, default=65536, help="events per pushed chunk")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_stream)

    p = sub.add_parser("mocomp", help="motion-compensate events and score FWL/RFWL")
    p.add_argument("--events", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--tref", type=float, default=None, help="reference time in seconds (default: window start)")
    p.add_argument("--out-prefix", required=True)
    common(p)
    p.set_defaults(func=_cmd_mocomp)

    p = sub.add_parser("eval", help="supervised metrics between two flow files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ae-convention", choices=("3d", "2d"), default="3d")
    p.add_argument("--out", default=None, help="also write the CSV to this path")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("train", help="train the flow network on (grid, flow) pairs")
    p.add_argument("--data-dir", required=True, help="directory of stem.evgr + stem.evaf pairs")
    p.add_argument("--config", required=True, help="key=value model/training config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-params", required=True)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run a parameter file over a grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--render", action="store_true", help="also write color-wheel PPMs")
    common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("trajectory", help="integrate seed tracks through a flow sequence")
    p.add_argument("--flows-dir", required=True, help="directory of flow_NNNN.evaf files")
    p.add_argument("--seeds", required=True, help="text file of 'x y' start positions")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_trajectory)

    p = sub.add_parser("report", help="aggregate metrics CSV rows into one table")
    p.add_argument("--dir", required=True)
    common(p)
    p.set_defaults(func=_cmd_report)

    return parser


def run(argv) -> int:
    """Dispatch one command line; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"evflow: numeric failure: {exc}", file=sys.stderr)
        return 4
    except (EvflowError, OSError, ValueError) as exc:
        print(f"evflow: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
