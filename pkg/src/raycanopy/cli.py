"""Command-line interface for the canopy density toolkit.

Single-stage subcommands mirror the pipeline stages for inspection and
debugging; `pipeline` runs everything; `simulate` dispatches the Monte Carlo
validation experiments; `compare` reports repeatability between two runs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import density as density_mod
from . import ground as ground_mod
from . import report as report_mod
from . import rows as rows_mod
from . import simulate as simulate_mod
from . import voxels as voxels_mod
from .pipeline import PipelineConfig, apply_overrides, load_config, run_pipeline
from .raycloud import load_raycloud, save_raycloud

EXPERIMENTS = ("turbid-bias", "triangle-bias", "error-surface", "trawl-vs-spin")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--voxel-width", type=float)
    p.add_argument("--n-min", type=int)
    p.add_argument("--g", type=float)
    p.add_argument("--curvature", type=float)
    p.add_argument("--bin-width", type=float)
    p.add_argument("--panel-length", type=float)
    p.add_argument("--row-spacing", type=float)
    p.add_argument("--max-density", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--estimator", choices=("mean", "mode"))
    p.add_argument("--sum", action="store_true",
                   help="aggregate panels by sum instead of mean")
    p.add_argument("--direction", help="fixed row direction as dx,dy")


def _build_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    for key in ("voxel_width", "n_min", "g", "curvature", "bin_width",
                "panel_length", "row_spacing", "max_density", "seed",
                "estimator", "direction"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "sum", False):
        overrides["panel_mode"] = "sum"
    return apply_overrides(config, overrides)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raycanopy",
                                description="Canopy density estimation from lidar ray clouds")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate and normalise a ray cloud file")
    s.add_argument("input")
    s.add_argument("output")

    s = sub.add_parser("ground", help="extract ground mesh and flatten the cloud")
    s.add_argument("input")
    s.add_argument("output_dir")
    _add_config_flags(s)

    s = sub.add_parser("rows", help="estimate row direction and split per row")
    s.add_argument("input")
    s.add_argument("output_dir")
    _add_config_flags(s)

    s = sub.add_parser("voxelize", help="accumulate per-voxel ray statistics")
    s.add_argument("input", help="row-frame ray cloud (from `rows`)")
    s.add_argument("output", help="voxel statistics CSV")
    _add_config_flags(s)

    s = sub.add_parser("density", help="estimate a density field from voxel stats")
    s.add_argument("input", help="voxel statistics CSV")
    s.add_argument("output", help="density field file (.rcdf)")
    _add_config_flags(s)

    s = sub.add_parser("integrate", help="images, series and panels from a field")
    s.add_argument("input", help="density field file (.rcdf)")
    s.add_argument("output_dir")
    _add_config_flags(s)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("input")
    s.add_argument("output_dir")
    _add_config_flags(s)

    s = sub.add_parser("simulate", help="Monte Carlo validation experiments")
    s.add_argument("experiment", choices=EXPERIMENTS)
    s.add_argument("output_dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int)

    s = sub.add_parser("compare", help="repeatability metrics between two runs")
    s.add_argument("series_a", help="along-row series CSV")
    s.add_argument("series_b")
    s.add_argument("--output", help="comparison CSV path")
    s.add_argument("--panel-length", type=float, default=7.0)
    return p


def _load_series_csv(path) -> report_mod.RowSeries:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    step = data[1, 0] - data[0, 0] if len(data) > 1 else 1.0
    return report_mod.RowSeries(values=data[:, 1], step=float(step))


def _cmd_ingest(args) -> int:
    cloud = load_raycloud(args.input)
    cloud.validate()
    save_raycloud(cloud, args.output)
    print(f"{len(cloud)} rays ({int(cloud.contact.sum())} contacts) -> {args.output}")
    return 0


def _cmd_ground(args) -> int:
    config = _build_config(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cloud = load_raycloud(args.input)
    cloud.validate()
    mesh = ground_mod.extract_ground(cloud, k=config.curvature)
    flat, dropped = ground_mod.subtract_ground(mesh, cloud)
    ground_mod.export_obj(mesh, out / "ground_mesh.obj")
    save_raycloud(flat, out / "flattened.ply")
    print(f"{len(mesh.triangles)} ground triangles; {dropped} rays outside footprint")
    return 0


def _cmd_rows(args) -> int:
    config = _build_config(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cloud = load_raycloud(args.input)
    if config.direction is not None:
        direction = np.asarray(config.direction) / np.linalg.norm(config.direction)
    else:
        traj = rows_mod.Trajectory.from_raycloud(cloud)
        traj.validate()
        direction = rows_mod.row_direction(traj)
    stem = Path(args.input).stem
    segments = rows_mod.split_rows(cloud, direction, bin_width=config.bin_width)
    for seg in segments:
        row_cloud = rows_mod.to_row_coordinates(seg)
        save_raycloud(row_cloud, out / f"{stem}_row{seg.index}.ply")
    print(f"direction ({direction[0]:.4f}, {direction[1]:.4f}); "
          f"{len(segments)} rows -> {out}")
    return 0


def _cmd_voxelize(args) -> int:
    config = _build_config(args)
    cloud = load_raycloud(args.input)
    grid = voxels_mod.build_grid(cloud, voxel_width=config.voxel_width)
    stats = voxels_mod.accumulate(cloud, grid)
    full = voxels_mod.expand_undersampled(stats, grid, n_min=config.n_min)
    voxels_mod.dump_stats_csv(full, grid, args.output)
    print(f"grid {grid.dims}, {len(stats)} voxels crossed -> {args.output}")
    return 0


def _cmd_density(args) -> int:
    config = _build_config(args)
    stats, grid = voxels_mod.load_stats_csv(args.input)
    field = density_mod.estimate_field(stats, grid, g=config.g,
                                       estimator=config.estimator)
    density_mod.save_field(field, args.output)
    print(f"total one-sided leaf area {field.total_leaf_area():.3f} m^2 -> {args.output}")
    return 0


def _cmd_integrate(args) -> int:
    config = _build_config(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    field = density_mod.load_field(args.input)
    tag = Path(args.input).stem
    image = report_mod.integrate_axis(field, "x")
    report_mod.render_colormap(image, config.max_density, out / f"{tag}_side.png")
    series = report_mod.along_row_series(field)
    report_mod.export_series_csv(series, out / f"{tag}_series.csv")
    panels = report_mod.panel_aggregate(series, config.panel_length,
                                        mode=config.panel_mode)
    if config.row_spacing is not None:
        panels = report_mod.with_lai(panels, config.panel_length, config.row_spacing)
    report_mod.export_panels_csv(panels, out / f"{tag}_panels.csv",
                                 row_index=field.grid.row_index)
    print(f"{len(panels)} panels -> {out}")
    return 0


def _cmd_pipeline(args) -> int:
    config = _build_config(args)
    manifest = run_pipeline(args.input, args.output_dir, config)
    print(f"{len(manifest['stages'])} stages complete -> {args.output_dir}")
    return 0


def _write_table(path, col_names, row_names, table) -> None:
    with open(path, "w") as f:
        f.write("," + ",".join(str(c) for c in col_names) + "\n")
        for name, row in zip(row_names, np.atleast_2d(table)):
            f.write(str(name) + "," + ",".join(f"{v:.9g}" for v in row) + "\n")


def _cmd_simulate(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.experiment == "turbid-bias":
        lam = [0.1, 0.2, 0.5, 1.0, 2.0, 3.0]
        ns = [2, 4, 8, 16, 32]
        trials = args.trials or 100_000
        for estimator in ("ml-mode", "debiased"):
            err, _ = simulate_mod.bias_curves(lam, ns, trials, estimator,
                                              seed=args.seed)
            _write_table(out / f"turbid_{estimator}.csv", ns, lam, err)
        print(f"turbid bias tables -> {out}")
    elif args.experiment == "triangle-bias":
        res = simulate_mod.triangle_bias_experiment(trials=args.trials or 4000,
                                                    seed=args.seed)
        names = [f"l={l}_A={a}" for l, a in res["configs"]] + ["reference"]
        table = np.vstack([res["error"], res["reference"]])
        _write_table(out / "triangle_bias.csv", res["n_values"], names, table)
        print(f"triangle bias table -> {out}")
    elif args.experiment == "error-surface":
        res = simulate_mod.debiased_error_surface(trials=args.trials or 1600,
                                                  seed=args.seed)
        _write_table(out / "error_surface.csv", np.round(res["a_values"], 4),
                     np.round(res["l_values"], 4), res["error"])
        img = report_mod.DensityImage(values=np.abs(res["error"]), axis="z",
                                      pixel_size=1.0)
        report_mod.render_colormap(img, 0.10, out / "error_surface.png")
        print(f"error surface -> {out}")
    else:
        res = simulate_mod.trawl_vs_spin(trials=args.trials or 400, seed=args.seed)
        names = ["-".join(str(v) for v in s) for s in res["normal_specs"]]
        _write_table(out / "trawl_vs_spin.csv", res["distributions"], names,
                     res["error_percent"])
        print(f"trawl vs spin table -> {out}")
    return 0


def _cmd_compare(args) -> int:
    a = _load_series_csv(args.series_a)
    b = _load_series_csv(args.series_b)
    pa = report_mod.panel_aggregate(a, args.panel_length)
    pb = report_mod.panel_aggregate(b, args.panel_length)
    count = min(len(pa), len(pb))
    va = [p.integrated_density for p in pa[:count]]
    vb = [p.integrated_density for p in pb[:count]]
    value = report_mod.rrmse(va, vb)
    print(f"panel RRMSE over {count} panels: {value:.4f}")
    if args.output:
        report_mod.export_comparison_csv(range(count), va, vb, args.output)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"ingest": _cmd_ingest, "ground": _cmd_ground, "rows": _cmd_rows,
                "voxelize": _cmd_voxelize, "density": _cmd_density,
                "integrate": _cmd_integrate, "pipeline": _cmd_pipeline,
                "simulate": _cmd_simulate, "compare": _cmd_compare}
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
