"""Command-line entry point: ``lidarfield <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 file/I-O error, 3 numeric failure.
Every command writes its outputs only when it succeeds and records the fully resolved
configuration next to them (``resolved_config.json``), which can be passed back via ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .beam import BeamProfile
from .field import VoxelGridField
from .fit import DivergenceError, TrainConfig, TrainingRays, TwoReturnClassifier, fit_field, \
    fit_two_return_classifier, two_return_training_features
from .geometry import build_bvh, load_scene
from .io import (FormatError, export_scan_ply, load_checkpoint, read_json, read_scan, read_trajectory,
                 save_checkpoint, write_json, write_range_image, write_range_preview, write_scan)
from .metrics import evaluate
from .plyio import SceneLoadError
from .protocol import SHIFT_PRESETS, FieldMethod, SurfelMethod, closed_loop, field_bounds_from_scans
from .render import RenderConfig, render_scan
from .scenes import SCENE_BUILDERS
from .surfel import SurfelConfig, SurfelBaseline
from .geometry import save_surfels_ply
from .waveform import SensorConfig, simulate_sensor_scan

log = logging.getLogger("lidarfield")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
SCAN_SUFFIX = ".nfl"
SIDECAR = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------------------------ helpers

def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("NFL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"NFL_THREADS must be an integer, got '{env}'")
    return 1


def _load_config(args) -> dict:
    return read_json(args.config) if getattr(args, "config", None) else {}


def _load_scene(spec: str):
    """A scene file path, or ``builtin:<name>[:arg...]`` with numeric positional arguments."""
    if spec.startswith("builtin:"):
        name, *extra = spec.split(":")[1:]
        if name not in SCENE_BUILDERS:
            raise UsageError(f"unknown builtin scene '{name}'; choose from {sorted(SCENE_BUILDERS)}")
        try:
            values = [float(x) for x in extra]
        except ValueError:
            raise UsageError(f"builtin scene arguments must be numbers: '{spec}'")
        return SCENE_BUILDERS[name](*values)
    return load_scene(spec)


def _scan_paths(items) -> list[Path]:
    out = []
    for it in items:
        p = Path(it)
        if p.is_dir():
            found = sorted(p.glob("*" + SCAN_SUFFIX))
            if not found:
                raise FormatError(f"{p}: directory holds no {SCAN_SUFFIX} files")
            out += found
        elif p.exists():
            out.append(p)
        else:
            raise FormatError(f"{p}: no such file or directory")
    return out


def _read_scans(items):
    return [read_scan(p) for p in _scan_paths(items)]


class _OutputDir:
    """Stage files in a temporary directory and move them into place only on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self):
        parent = self.target.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".stage-", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.target.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.tmp.iterdir()):
                os.replace(f, self.target / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_scans(directory: Path, scans):
    for k, s in enumerate(scans):
        write_scan(directory / f"scan_{k:04d}{SCAN_SUFFIX}", s)


def _sensor(args, cfg) -> SensorConfig:
    if getattr(args, "sensor", None):
        return SensorConfig.from_dict(read_json(args.sensor))
    if "sensor" in cfg:
        return SensorConfig.from_dict(cfg["sensor"])
    raise UsageError("a sensor config is required (--sensor or a 'sensor' section in --config)")


def _trajectory(args, cfg):
    if getattr(args, "trajectory", None):
        return read_trajectory(args.trajectory)
    if "trajectory" in cfg:
        from .types import SensorPose
        return [SensorPose.from_dict(p) for p in cfg["trajectory"]]
    raise UsageError("a trajectory is required (--trajectory or a 'trajectory' section in --config)")


def _train_config(cfg: dict, seed) -> TrainConfig:
    tc = TrainConfig.from_dict(cfg.get("train", {}))
    if seed is not None:
        tc.seed = int(seed)
    return tc


def _field_section(cfg: dict) -> dict:
    d = {"voxel_size": 0.2, "margin": 1.0, "bounds": None, "two_return_mode": "threshold", "std_threshold": 0.3}
    extra = set(cfg.get("field", {})) - set(d)
    if extra:
        raise UsageError(f"unknown field config keys: {sorted(extra)}")
    d.update(cfg.get("field", {}))
    return d


# ------------------------------------------------------------------------------------ commands

def cmd_simulate(args):
    cfg = _load_config(args)
    sensor = _sensor(args, cfg)
    poses = _trajectory(args, cfg)
    scene_spec = args.scene or cfg.get("scene")
    if not scene_spec:
        raise UsageError("--scene is required")
    scene = build_bvh(_load_scene(scene_spec))
    threads = _threads(args)
    with _OutputDir(args.out) as out:
        scans = [simulate_sensor_scan(scene, sensor, p, threads) for p in poses]
        _write_scans(out, scans)
        write_json(out / SIDECAR, {"command": "simulate", "scene": scene_spec, "sensor": sensor.to_dict(),
                                   "trajectory": [p.to_dict() for p in poses]})
    log.info("wrote %d scans (%d beams each) to %s", len(poses), sensor.pattern.size, args.out)


def _fit_method(cfg, args, threads) -> FieldMethod:
    tc = _train_config(cfg, args.seed)
    fs = _field_section(cfg)
    return FieldMethod(tc, float(fs["voxel_size"]), fs["bounds"], float(fs["margin"]), fs["two_return_mode"],
                       float(fs["std_threshold"]), threads)


def cmd_fit(args):
    cfg = _load_config(args)
    scans = _read_scans(args.scans)
    threads = _threads(args)
    m = _fit_method(cfg, args, threads)
    lo, hi = m.bounds if m.bounds is not None else field_bounds_from_scans(scans, m.margin)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    res = np.maximum(np.ceil((hi - lo) / m.voxel_size).astype(int) + 1, 2)
    result = fit_field(scans, VoxelGridField((lo, hi), res), m.train, threads=threads,
                       progress_every=args.log_every)
    clf = None
    if m.two_return_mode == "threshold":
        clf = TwoReturnClassifier("threshold", std_threshold=m.std_threshold)
    elif m.two_return_mode == "logistic":
        feats, labels = two_return_training_features(result.field, TrainingRays.from_scans(scans), m.train)
        try:
            clf = fit_two_return_classifier(feats, labels)
        except ValueError:
            clf = TwoReturnClassifier("threshold", std_threshold=m.std_threshold)
    resolved = {"command": "fit", "train": m.train.to_dict(),
                "field": {"voxel_size": m.voxel_size, "margin": m.margin, "bounds": [lo.tolist(), hi.tolist()],
                          "two_return_mode": m.two_return_mode, "std_threshold": m.std_threshold}}
    meta = dict(resolved, loss_curve=result.loss_curve, classifier=clf.to_dict() if clf else None)
    out = Path(args.out)
    save_checkpoint(out, result.field, meta)
    write_json(Path(str(out) + ".resolved.json"), resolved)
    log.info("final loss %.5f after %d steps", result.loss_curve[-1] if result.loss_curve else float("nan"),
             len(result.loss_curve))


def cmd_render(args):
    cfg = _load_config(args)
    field, meta = load_checkpoint(args.checkpoint)
    sensor = _sensor(args, cfg)
    poses = _trajectory(args, cfg)
    train = TrainConfig.from_dict(meta.get("train", {}))
    rc = RenderConfig.from_dict(cfg["render"]) if "render" in cfg else train.render
    profile = BeamProfile.preset(train.gamma0, train.subrays)
    clf = TwoReturnClassifier.from_dict(meta["classifier"]) if meta.get("classifier") else None
    threads = _threads(args)
    with _OutputDir(args.out) as out:
        scans = [render_scan(field, sensor.pattern, p, profile, rc, clf, threads) for p in poses]
        _write_scans(out, scans)
        write_json(out / SIDECAR, {"command": "render", "render": rc.to_dict(), "sensor": sensor.to_dict(),
                                   "trajectory": [p.to_dict() for p in poses]})


def cmd_baseline(args):
    cfg = _load_config(args)
    scfg = SurfelConfig.from_dict(cfg.get("surfel", {}))
    scans = _read_scans(args.scans)
    poses = read_trajectory(args.trajectory) if args.trajectory else [s.pose for s in scans]
    base = SurfelBaseline(scfg).fit(scans)
    with _OutputDir(args.out) as out:
        save_surfels_ply(out / "surfels.ply", base.surfels)
        _write_scans(out, base.render(poses, scans[0].pattern))
        write_json(out / SIDECAR, {"command": "baseline", "surfel": scfg.to_dict(),
                                   "trajectory": [p.to_dict() for p in poses]})


def cmd_eval(args):
    pred, gt = _read_scans(args.pred), _read_scans(args.gt)
    if len(pred) != len(gt):
        raise UsageError(f"{len(pred)} predicted scans but {len(gt)} ground-truth scans")
    report = evaluate(pred, gt)
    with _OutputDir(args.out) as out:
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.csv").write_text(report.to_csv(args.name))
        write_json(out / SIDECAR, {"command": "eval", "name": args.name})
    print(report.to_json())


def cmd_closed_loop(args):
    cfg = _load_config(args)
    scans = _read_scans(args.scans)
    threads = _threads(args)
    if args.shift is not None:
        shift = tuple(args.shift)
    elif "shift" in cfg:
        shift = tuple(float(x) for x in cfg["shift"])
    else:
        shift = SHIFT_PRESETS[args.shift_preset]
    method = args.method or cfg.get("method", "field")
    if method == "field":
        def make():
            return _fit_method(cfg, args, threads)
        section = {"train": _train_config(cfg, args.seed).to_dict(), "field": _field_section(cfg)}
    elif method == "surfel":
        scfg = SurfelConfig.from_dict(cfg.get("surfel", {}))

        def make():
            return SurfelMethod(scfg)
        section = {"surfel": scfg.to_dict()}
    else:
        raise UsageError(f"unknown method '{method}'")
    result = closed_loop(make, scans, shift)
    with _OutputDir(args.out) as out:
        (out / "report.json").write_text(result.report.to_json() + "\n")
        (out / "report.csv").write_text(result.report.to_csv(args.name))
        write_json(out / SIDECAR, dict(command="closed-loop", method=method, shift=list(shift), **section))
    print(result.report.to_json())


def cmd_range_image(args):
    scan = read_scan(args.scan)
    out = Path(args.out)
    img = write_range_image(out, scan)
    if args.preview:
        write_range_preview(args.preview, img, scan.pattern.max_range)
    if args.ply:
        export_scan_ply(args.ply, scan)


# ------------------------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidarfield", description="Waveform LiDAR simulation and volumetric field fitting.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        sp = _add(name, **kw)
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        return sp
    sub.add_parser = add_parser

    def common(sp, out_help):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--config", help="JSON config (a resolved_config.json sidecar works too)")
        sp.add_argument("--threads", type=int, help="worker threads (default: $NFL_THREADS or 1)")
        sp.add_argument("--seed", type=int, help="RNG seed override")

    s = sub.add_parser("simulate", help="simulate scans of a scene along a trajectory")
    common(s, "output directory for scan files")
    s.add_argument("--scene", help="mesh/surfel PLY, OBJ, or builtin:<wall|edge|box|slanted>[:args]")
    s.add_argument("--sensor", help="sensor JSON config")
    s.add_argument("--trajectory", help="trajectory JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a voxel field to scans")
    common(s, "checkpoint path")
    s.add_argument("--scans", nargs="+", required=True, help="scan files or directories")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render scans from a fitted checkpoint")
    common(s, "output directory for scan files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sensor", help="sensor JSON config (scan pattern)")
    s.add_argument("--trajectory", help="trajectory JSON")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("baseline", help="surfel reconstruction + re-simulation")
    common(s, "output directory (surfels.ply + scan files)")
    s.add_argument("--scans", nargs="+", required=True)
    s.add_argument("--trajectory", help="poses to render (default: the input scan poses)")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("eval", help="compare predicted scans with ground truth")
    common(s, "output directory for report.json / report.csv")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--name", default="scene", help="scene label in the CSV row")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("closed-loop", help="shifted-trajectory round trip evaluation")
    common(s, "output directory for the report")
    s.add_argument("--scans", nargs="+", required=True)
    s.add_argument("--method", choices=("field", "surfel"))
    s.add_argument("--shift", type=float, nargs=3, metavar=("DX", "DY", "DZ"))
    s.add_argument("--shift-preset", choices=sorted(SHIFT_PRESETS), default="default")
    s.add_argument("--name", default="scene")
    s.set_defaults(func=cmd_closed_loop)

    s = sub.add_parser("range-image", help="export a scan as a range-view grid")
    s.add_argument("--scan", required=True)
    s.add_argument("--out", required=True, help="range image file (NFLR)")
    s.add_argument("--preview", help="optional PNG preview")
    s.add_argument("--ply", help="optional lossy PLY point export")
    s.set_defaults(func=cmd_range_image)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"lidarfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SceneLoadError, OSError) as exc:
        print(f"lidarfield {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError) as exc:
        print(f"lidarfield {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"lidarfield {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
