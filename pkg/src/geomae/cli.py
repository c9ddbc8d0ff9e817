"""Command-line entry point: ``geomae <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .geo_targets import build_target_records, surface_for_voxels
from .masking import DEFAULT_RATIO, select_mask
from .pointcloud_io import PointCloud, PointFormatError, TargetFileError, read_points, read_targets, write_points, write_targets
from .scene_synth import ShapeError, compose_scene, load_scene_spec
from .voxelizer import PRESETS, GridConfig, GridConfigError, voxelize

log = logging.getLogger("geomae")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_IO = 2
EXIT_GRID = 3
EXIT_NONFINITE = 4

# stored f32 surface values are compared to the oracle's f32 values with this slack
STORED_SURFACE_TOL = 1e-6
EIGEN_TOL = 1e-10
CURVATURE_TOL = 1e-9
NORMAL_ANGLE_TOL = 1e-8


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _default_threads() -> int:
    raw = os.environ.get("GEOMAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _point_format(path: str, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "xyzi_bin" if Path(path).suffix == ".bin" else "csv"


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid (either --preset or all three explicit flags)")
    g.add_argument("--preset", choices=sorted(PRESETS))
    for flag in ("--range-min", "--range-max", "--voxel-size"):
        g.add_argument(flag, nargs="+", metavar="X,Y,Z", help="three values, comma- or space-separated")


def _add_points_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--points", required=True, help="input point file")
    p.add_argument("--format", choices=("csv", "xyzi_bin"), help="point format (default from file suffix)")


def _triple(flag: str, tokens) -> tuple:
    parts = [t for tok in tokens for t in tok.replace(",", " ").split()]
    try:
        values = tuple(float(t) for t in parts)
    except ValueError as exc:
        raise CliError(EXIT_GRID, f"{flag}: {exc}") from exc
    if len(values) != 3:
        raise CliError(EXIT_GRID, f"{flag} needs exactly three values, got {len(values)}")
    return values


def grid_from_args(args) -> GridConfig:
    explicit = [args.range_min, args.range_max, args.voxel_size]
    if args.preset is not None:
        if any(v is not None for v in explicit):
            raise CliError(EXIT_GRID, "--preset cannot be combined with --range-min/--range-max/--voxel-size")
        return PRESETS[args.preset]
    if any(v is None for v in explicit):
        raise CliError(EXIT_GRID, "give --preset or all of --range-min, --range-max, --voxel-size")
    try:
        return GridConfig(
            _triple("--range-min", args.range_min),
            _triple("--range-max", args.range_max),
            _triple("--voxel-size", args.voxel_size),
        )
    except GridConfigError as exc:
        raise CliError(EXIT_GRID, f"invalid grid: {exc}") from exc


def _load_points(args) -> PointCloud:
    try:
        return read_points(args.points, _point_format(args.points, args.format))
    except (OSError, PointFormatError) as exc:
        raise CliError(EXIT_IO, f"cannot read points: {exc}") from exc


def _ratio(args) -> float:
    if not 0.0 <= args.mask_ratio <= 1.0:
        raise CliError(EXIT_IO, "--mask-ratio must lie in [0, 1]")
    return args.mask_ratio


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        spec = load_scene_spec(args.spec)
        cloud = compose_scene(spec)
    except (OSError, ValueError, KeyError, TypeError, ShapeError) as exc:
        raise CliError(EXIT_IO, f"cannot build scene: {exc}") from exc
    fmt = _point_format(args.out, args.format)
    try:
        write_points(args.out, cloud, fmt)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    emit({"command": "synth", "points": cloud.count, "format": fmt, "out": str(args.out)})
    return EXIT_OK


def cmd_gen_targets(args) -> int:
    config = grid_from_args(args)
    cloud = _load_points(args)
    ratio = _ratio(args)
    part = voxelize(cloud, config)
    mask = select_mask(part.group_ids, ratio, args.seed)
    records = build_target_records(part, mask.masked_ids, threads=args.threads)
    try:
        write_targets(args.out, records, config)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    n_valid = int(records["surface_valid"].sum())
    emit(
        {
            "command": "gen-targets",
            "points": cloud.count,
            "points_in_range": int(part.points.shape[0]),
            "voxels": part.n_nonempty,
            "masked": int(len(records)),
            "valid_surface_fraction": n_valid / len(records) if len(records) else 0.0,
            "voxel_size": list(config.voxel_size),
            "threads": args.threads,
        }
    )
    return EXIT_OK


def verify_cloud(cloud: PointCloud, config: GridConfig, ratio: float, seed: int, stored=None) -> dict:
    """Compare production targets (and optionally a stored target file) with the oracle."""
    from .reference_oracle import compare_records, compare_surface, oracle_records

    part = voxelize(cloud, config)
    mask = select_mask(part.group_ids, ratio, seed)
    prod = build_target_records(part, mask.masked_ids)
    pts = np.asarray(cloud.points, dtype=np.float64)
    ref, diag = oracle_records(pts, config, mask.masked_ids)
    rec = compare_records(prod, ref)
    surf = compare_surface(surface_for_voxels(part, mask.masked_ids), diag)
    report = {"command": "verify", "voxels": part.n_nonempty, "records": rec["records"]}
    report.update({f"records.{k}": v for k, v in rec.items() if k != "records"})
    report.update({f"surface.{k}": v for k, v in surf.items()})
    ok = (
        rec["id_mismatch"] == 0
        and rec["occupancy_mismatch"] == 0
        and rec["centroid_mismatch"] == 0
        and rec["valid_mismatch"] == 0
        and surf["valid_mismatch"] == 0
        and surf["eigenvalue_max_abs"] <= EIGEN_TOL
        and surf["curvature_max_abs"] <= CURVATURE_TOL
        and surf["normal_max_angle"] <= NORMAL_ANGLE_TOL
    )
    if stored is not None:
        header_ok = (
            stored.range_min == config.range_min
            and stored.range_max == config.range_max
            and stored.voxel_size == config.voxel_size
        )
        st = compare_records(stored.records, ref)
        report["stored.header_match"] = header_ok
        report.update({f"stored.{k}": v for k, v in st.items()})
        ok = ok and header_ok and all(
            st[k] == 0 for k in ("id_mismatch", "occupancy_mismatch", "centroid_mismatch", "valid_mismatch")
        )
        ok = ok and st["curvature_max_abs"] <= STORED_SURFACE_TOL and st["normal_max_abs"] <= STORED_SURFACE_TOL
    report["ok"] = bool(ok)
    return report


def cmd_verify(args) -> int:
    config = grid_from_args(args)
    cloud = _load_points(args)
    stored = None
    if args.targets:
        try:
            stored = read_targets(args.targets)
        except (OSError, TargetFileError) as exc:
            log.error("cannot read targets: %s", exc)
            emit({"command": "verify", "ok": False, "error": str(exc)})
            return EXIT_MISMATCH
    try:
        report = verify_cloud(cloud, config, _ratio(args), args.seed, stored)
    except ValueError as exc:
        emit({"command": "verify", "ok": False, "error": str(exc)})
        return EXIT_MISMATCH
    emit(report)
    return EXIT_OK if report["ok"] else EXIT_MISMATCH


def cmd_pretrain(args) -> int:
    from .model.train import (
        NonFiniteLoss,
        TrainConfig,
        clouds_from_dir,
        load_train_config,
        make_batches,
        save_params,
        synthetic_clouds,
        train,
        write_loss_csv,
    )

    try:
        cfg = load_train_config(args.config) if args.config else TrainConfig()
        if args.steps is not None:
            cfg.steps = args.steps
        if args.seed is not None:
            cfg.seed = args.seed
        clouds = clouds_from_dir(args.scenes) if args.scenes else synthetic_clouds(cfg)
        batches = make_batches(clouds, cfg)
    except (OSError, ValueError, TypeError, KeyError, PointFormatError) as exc:
        raise CliError(EXIT_IO, f"cannot set up training: {exc}") from exc
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    log.info("training %d steps on %d batch(es)", cfg.steps, len(batches))
    try:
        result = train(cfg, batches)
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        emit({"command": "pretrain", "error": "non-finite loss", "step": exc.step})
        return EXIT_NONFINITE
    write_loss_csv(out / "loss.csv", result.history)
    save_params(out / "params.gmp", result.params, cfg.model)
    summary = {"command": "pretrain", "steps": cfg.steps, "out": str(out)}
    if result.history:
        summary["first_total"] = result.history[0][-1]
        summary["last_total"] = result.history[-1][-1]
    emit(summary)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if bool(args.targets) == bool(args.points):
        raise CliError(EXIT_IO, "give exactly one of --targets or --points")
    if args.targets:
        try:
            tf = read_targets(args.targets)
        except (OSError, TargetFileError) as exc:
            raise CliError(EXIT_IO, f"cannot read targets: {exc}") from exc
        recs = tf.records
        n = len(recs)
        emit(
            {
                "command": "inspect",
                "kind": "targets",
                "version": tf.version,
                "range_min": list(tf.range_min),
                "range_max": list(tf.range_max),
                "voxel_size": list(tf.voxel_size),
                "records": n,
                "valid_surface_fraction": float(recs["surface_valid"].mean()) if n else 0.0,
                "mean_occupied_grids": float(recs["occupancy"].sum(axis=1).mean()) if n else 0.0,
            }
        )
        return EXIT_OK
    cloud = _load_points(args)
    pts = np.asarray(cloud.points, dtype=np.float64)
    emit(
        {
            "command": "inspect",
            "kind": "points",
            "points": cloud.count,
            "has_intensity": cloud.intensity is not None,
            "min": pts.min(axis=0).tolist() if cloud.count else None,
            "max": pts.max(axis=0).tolist() if cloud.count else None,
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomae", description="Geometric pre-training targets and a desk-scale masked autoencoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a point cloud from a JSON scene spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "xyzi_bin"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-targets", help="voxelize, mask and write a GMT1 target file")
    _add_points_flags(p)
    _add_grid_flags(p)
    p.add_argument("--mask-ratio", type=float, default=DEFAULT_RATIO)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_targets)

    p = sub.add_parser("pretrain", help="train the masked autoencoder")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--scenes", help="directory of point files (default: synthetic scenes)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("verify", help="check production targets against the reference oracle")
    _add_points_flags(p)
    _add_grid_flags(p)
    p.add_argument("--mask-ratio", type=float, default=DEFAULT_RATIO)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", help="also check a stored target file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="summarize a point or target file")
    p.add_argument("--targets")
    p.add_argument("--points")
    p.add_argument("--format", choices=("csv", "xyzi_bin"))
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
