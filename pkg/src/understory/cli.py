"""Command-line interface: composable subcommands driven by a run manifest.

Every subcommand reads its declared inputs, writes its declared outputs plus
a resolved copy of the manifest, and exits 0 on success. Failures map to
stable exit codes: 2 usage, 3 input format, 4 invariant violation, 5 numeric
failure. Log lines are `key=value` oriented.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline, report, spectral, storage
from .errors import InputFormatError, InvariantError, MissingInputError, UnderstoryError
from .manifest import RunManifest
from .network import load_model, save_model, write_history_csv
from .pipeline import EvalReport
from .receptive import build_dataset, write_dataset
from .scene import extract_top_layer, generate_forest, load_scene, save_scene, voxelize

logger = logging.getLogger("understory.cli")


def _load_manifest(args) -> RunManifest:
    manifest = RunManifest.load(args.manifest) if args.manifest else RunManifest()
    for pair in args.set or []:
        if "=" not in pair:
            raise InputFormatError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        manifest.set_from_string(key.strip(), raw.strip())
    if getattr(args, "paper_scale", False):
        manifest.set_from_string("paper_scale", "true")
    return manifest


def _emit_manifest(manifest: RunManifest, anchor: Path) -> None:
    """Write the resolved manifest next to the command's outputs."""
    anchor = Path(anchor)
    target = anchor / "manifest.resolved.txt" if anchor.is_dir() else (
        anchor.parent / (anchor.stem + ".manifest.txt")
    )
    target.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(target)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommand handlers -----------------------------------------------------


def cmd_simulate(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    out = _outdir(args.out_dir)
    scene = generate_forest(config.forest)
    volume = voxelize(scene, config.dims, config.z_top)
    save_scene(scene, out / "scene.txt")
    storage.save_ground_truth(volume, out / "truth.dfvl")
    _emit_manifest(manifest, out)
    logger.info(
        "event=simulate seed=%d density=%s trees=%d out=%s",
        config.forest.seed, config.forest.density, len(scene.trees), out,
    )
    return 0


def cmd_scan(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    volume = storage.load_ground_truth(args.truth)
    scan = pipeline.scan_plot(volume, config)
    out = _outdir(args.out_dir)
    storage.write_scan(scan, out)
    _emit_manifest(manifest, out)
    logger.info("event=scan poses=%d out=%s", len(scan.poses), out)
    return 0


def cmd_focal_stack(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    scan = storage.read_scan(args.scan)
    z_min, z_max = config.focal_range
    stack = pipeline.build_focal_stack(
        scan, z_min, z_max, config.dims[2],
        (config.dims[0], config.dims[1], config.forest.plot_side),
    )
    storage.save_stack(stack, args.out)
    _emit_manifest(manifest, Path(args.out))
    logger.info("event=focal-stack slices=%d out=%s", config.dims[2], args.out)
    return 0


def _load_plots(args):
    if len(args.stack) != len(args.truth):
        raise InvariantError(
            f"{len(args.stack)} stacks but {len(args.truth)} truth volumes"
        )
    return [
        (storage.load_stack(s), storage.load_ground_truth(t))
        for s, t in zip(args.stack, args.truth)
    ]


def cmd_dataset(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    plots = _load_plots(args)
    dataset = build_dataset(
        [s for s, _ in plots],
        [t for _, t in plots],
        args.layer,
        config.patch_dims,
        config.geometry,
        include_void=config.include_void,
        split_fractions=config.split_fractions,
        seed=config.seed,
    )
    write_dataset(dataset, args.out)
    _emit_manifest(manifest, Path(args.out))
    logger.info(
        "event=dataset layer=%d patches=%d out=%s", args.layer, len(dataset), args.out
    )
    return 0


def cmd_train(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    plots = _load_plots(args)
    models, histories = pipeline.train_all_layers(plots, config)
    out = _outdir(args.out_dir)
    for k, (model, history) in enumerate(zip(models, histories)):
        save_model(model, out / f"model_{k:03d}.dfrm")
        if history:
            write_history_csv(history, out / f"history_{k:03d}.csv")
    _emit_manifest(manifest, out)
    n_fallback = sum(1 for m in models if m.fallback)
    logger.info(
        "event=train layers=%d fallback=%d out=%s", len(models), n_fallback, out
    )
    return 0


def _load_models(models_dir: Path, vd: int):
    models_dir = Path(models_dir)
    if not models_dir.is_dir():
        raise MissingInputError(f"models directory {models_dir} does not exist")
    files = sorted(models_dir.glob("model_*.dfrm"))
    if len(files) != vd:
        raise InvariantError(f"need {vd} models (one per layer), found {len(files)}")
    return [load_model(p) for p in files]


def cmd_correct(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    stack = storage.load_stack(args.stack)
    models = _load_models(args.models_dir, stack.dims[2])
    corrected = pipeline.correct_stack(stack, models, config.geometry)
    storage.save_stack(corrected, args.out)
    _emit_manifest(manifest, Path(args.out))
    logger.info("event=correct layers=%d out=%s", stack.dims[2], args.out)
    return 0


def _top_layer_from_args(args, dims, extent, z_top):
    if getattr(args, "truth", None):
        volume = storage.load_ground_truth(args.truth)
        if tuple(volume.dims) != tuple(dims):
            raise InvariantError("truth volume dims do not match the stack")
        return extract_top_layer(volume)
    if getattr(args, "points", None):
        pts = _read_pointcloud(args.points)
        depth, dropped = spectral.ingest_top_layer_pointcloud(pts, dims, extent, z_top)
        if dropped:
            logger.info("event=pointcloud-dropped count=%d", dropped)
        return depth
    raise InvariantError("a top-layer source (--truth or --points) is required")


def _read_pointcloud(path) -> np.ndarray:
    try:
        with open(path) as fh:
            rows = []
            for ln_no, ln in enumerate(fh, 1):
                ln = ln.strip()
                if not ln or ln.startswith("#"):
                    continue
                parts = ln.split()
                if len(parts) != 3:
                    raise InputFormatError(f"{path}:{ln_no}: expected `x y z`")
                rows.append([float(v) for v in parts])
    except OSError as exc:
        raise MissingInputError(f"cannot read point cloud: {exc}") from exc
    except ValueError as exc:
        raise InputFormatError(f"{path}: unparsable point line") from exc
    if not rows:
        raise InputFormatError(f"{path}: empty point cloud")
    return np.asarray(rows)


def cmd_map(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    stack = storage.load_reflectance_stack(args.stack)
    scan = storage.read_scan(args.scan)
    center = scan.center_pose_index()
    top = _top_layer_from_args(args, stack.dims, stack.extent, config.z_top)
    mapped = spectral.sensor_map(
        stack, top, scan.images[center], scan.poses[center], scan.intrinsics
    )
    vals = np.where(mapped.valid, mapped.values, np.nan)
    bbox = (
        0.0, mapped.extent, 0.0, mapped.extent,
        float(mapped.focal_heights[0]), float(mapped.focal_heights[-1]),
    )
    storage.write_volume(args.out, vals, bbox, "reflectance")
    _emit_manifest(manifest, Path(args.out))
    logger.info("event=map center_pose=%d out=%s", center, args.out)
    return 0


def cmd_index(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    nir = storage.load_reflectance_stack(args.nir)
    red = storage.load_reflectance_stack(args.red)
    index = spectral.ndvi(nir, red)
    if args.truth or args.points:
        top = _top_layer_from_args(args, index.dims, index.extent, config.z_top)
        index = spectral.remove_above_canopy(index, top)
    storage.save_index_stack(index, args.out)
    est = None
    if args.truth or args.points:
        est = spectral.biomass_fraction(index, manifest["ndvi_threshold"])
        logger.info(
            "event=biomass threshold=%s fraction=%.4f kept=%s total=%s",
            manifest["ndvi_threshold"], est.fraction,
            repr(est.kept_volume), repr(est.total_volume),
        )
    _emit_manifest(manifest, Path(args.out))
    logger.info("event=index out=%s", args.out)
    return 0


def cmd_filter(args) -> int:
    manifest = _load_manifest(args)
    index = storage.load_index_stack(args.index)
    if args.crop:
        index = spectral.crop(index, tuple(args.crop))
    if args.lo is not None or args.hi is not None:
        lo = -1.0 if args.lo is None else args.lo
        hi = 1.0 if args.hi is None else args.hi
        index = spectral.range_filter(index, lo, hi)
    storage.save_index_stack(index, args.out)
    _emit_manifest(manifest, Path(args.out))
    logger.info("event=filter out=%s", args.out)
    return 0


def cmd_export(args) -> int:
    manifest = _load_manifest(args)
    vals, bbox, kind = storage.read_volume(args.volume)
    if args.format == "layers":
        if kind == "reflectance":
            vals = np.nan_to_num(vals, nan=0.0)
        remap = tuple(args.remap) if args.remap else None
        storage.write_layers(vals, args.out, remap=remap)
        _emit_manifest(manifest, _outdir(args.out))
    else:
        dims = vals.shape
        spacing = (
            (bbox[1] - bbox[0]) / dims[0],
            (bbox[3] - bbox[2]) / dims[1],
            (bbox[5] - bbox[4]) / dims[2] if dims[2] > 1 else 1.0,
        )
        opacity = None
        if args.opacity:
            opacity, _, _ = storage.read_volume(args.opacity)
            opacity = np.nan_to_num(opacity, nan=0.0)
        payload = np.nan_to_num(vals, nan=0.0) if kind == "reflectance" else vals
        storage.write_vti(
            args.out, payload, spacing, opacity=opacity,
            origin=(bbox[0], bbox[2], bbox[4]),
        )
        _emit_manifest(manifest, Path(args.out))
    logger.info("event=export format=%s out=%s", args.format, args.out)
    return 0


def cmd_evaluate(args) -> int:
    manifest = _load_manifest(args)
    truth = storage.load_ground_truth(args.truth)
    stack = storage.load_stack(args.uncorrected)
    unc_vals = np.where(stack.valid, stack.values, np.nan)
    unc_mse, counts = pipeline.evaluate_layers(unc_vals, truth)
    if args.corrected:
        corrected = storage.load_reflectance_stack(args.corrected)
        cor_mse, _ = pipeline.evaluate_layers(corrected.values, truth)
    else:
        cor_mse = np.full_like(unc_mse, np.nan)
    rep = EvalReport(
        layer_heights=stack.focal_heights.copy(),
        uncorrected_mse=unc_mse,
        corrected_mse=cor_mse,
        counts=counts,
        density_tag=str(manifest["density"]),
    )
    out = _outdir(args.out_dir)
    report.write_report_csv(rep, out / "report.csv")
    report.plot_report(rep, out / "report_mse_by_layer.png")
    _emit_manifest(manifest, out)
    logger.info("event=evaluate out=%s", out)
    return 0


def cmd_sweep(args) -> int:
    manifest = _load_manifest(args)
    config = manifest.pipeline_config()
    rows = pipeline.density_sweep(
        list(manifest["densities"]),
        list(manifest["eval_seeds"]),
        config,
        train_seeds=list(manifest["train_seeds"]),
    )
    out = _outdir(args.out_dir)
    report.write_sweep_csv(rows, out / "sweep.csv")
    report.plot_sweep(rows, out / "sweep_mse_by_density.png")
    _emit_manifest(manifest, out)
    logger.info("event=sweep rows=%d out=%s", len(rows), out)
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="understory",
        description="Below-canopy reflectance sensing pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", help="run manifest file (key = value lines)")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override one manifest key (repeatable)",
        )
        p.add_argument(
            "--paper-scale", action="store_true",
            help="use the published full-scale configuration",
        )
        return p

    p = common(sub.add_parser("simulate", help="generate a forest plot + ground truth"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("scan", help="render the aperture pose grid"))
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_scan)

    p = common(sub.add_parser("focal-stack", help="integrate a scan into a focal stack"))
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_focal_stack)

    p = common(sub.add_parser("dataset", help="build one layer's patch dataset"))
    p.add_argument("--stack", action="append", required=True)
    p.add_argument("--truth", action="append", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = common(sub.add_parser("train", help="train one corrector per layer"))
    p.add_argument("--stack", action="append", required=True)
    p.add_argument("--truth", action="append", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("correct", help="apply layer models to a stack"))
    p.add_argument("--stack", required=True)
    p.add_argument("--models-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correct)

    p = common(sub.add_parser("map", help="sensor-map a corrected stack"))
    p.add_argument("--stack", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--truth")
    p.add_argument("--points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = common(sub.add_parser("index", help="compute a vegetation-index stack"))
    p.add_argument("--nir", required=True)
    p.add_argument("--red", required=True)
    p.add_argument("--truth")
    p.add_argument("--points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = common(sub.add_parser("filter", help="range-filter / crop an index stack"))
    p.add_argument("--index", required=True)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--crop", type=int, nargs=6, metavar=("X0", "X1", "Y0", "Y1", "Z0", "Z1"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = common(sub.add_parser("export", help="export a volume to layers or VTI"))
    p.add_argument("--volume", required=True)
    p.add_argument("--format", choices=("layers", "vti"), required=True)
    p.add_argument("--remap", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--opacity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = common(sub.add_parser("evaluate", help="per-layer error report vs ground truth"))
    p.add_argument("--truth", required=True)
    p.add_argument("--uncorrected", required=True)
    p.add_argument("--corrected")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("sweep", help="density sweep with training + evaluation"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UnderstoryError as exc:
        print(f'error={type(exc).__name__} message="{exc}"', file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
