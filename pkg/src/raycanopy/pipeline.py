"""End-to-end pipeline: ray cloud in, per-row density products out.

Stages: ground -> rows -> voxelize -> density -> integrate. Each stage's
outputs are cached under a content hash of the input file and the config
subset it depends on, so reruns skip unchanged upstream stages. A failed
stage aborts with its name and removes its partial outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import density as density_mod
from . import ground as ground_mod
from . import report as report_mod
from . import rows as rows_mod
from . import voxels as voxels_mod
from .raycloud import RayCloud, load_raycloud, save_raycloud

STAGES = ("ground", "rows", "voxelize", "density", "integrate")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    """All tunables of the pipeline; every simulation seed derives from `seed`."""

    voxel_width: float = 0.12
    n_min: int = 10
    g: float = 2.0
    curvature: float = 0.1
    bin_width: float = 0.2
    panel_length: float = 7.0
    row_spacing: float | None = None
    max_density: float = 10.4
    seed: int = 0
    estimator: str = "mean"
    panel_mode: str = "mean"
    direction: tuple[float, float] | None = None   # fixed row direction override

    def __post_init__(self):
        for name in ("voxel_width", "g", "curvature", "bin_width",
                     "panel_length", "max_density"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.row_spacing is not None and self.row_spacing <= 0:
            raise ValueError("row_spacing must be positive")


def load_config(path) -> PipelineConfig:
    """Flat key=value config file; '#' comments and blank lines ignored."""
    values: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return apply_overrides(PipelineConfig(), values)


def apply_overrides(config: PipelineConfig, values: dict) -> PipelineConfig:
    fields = {"voxel_width": float, "n_min": int, "g": float, "curvature": float,
              "bin_width": float, "panel_length": float, "row_spacing": float,
              "max_density": float, "seed": int, "estimator": str, "panel_mode": str}
    kwargs = {}
    for key, raw in values.items():
        if key == "direction":
            parts = [float(v) for v in str(raw).replace(",", " ").split()]
            if len(parts) != 2:
                raise ValueError("direction must be two numbers: dx,dy")
            kwargs["direction"] = (parts[0], parts[1])
        elif key in fields:
            kwargs[key] = fields[key](raw) if not isinstance(raw, fields[key]) else raw
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(config, **kwargs)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        for key, value in asdict(config).items():
            if value is None:
                continue
            if key == "direction":
                value = f"{value[0]},{value[1]}"
            f.write(f"{key}={value}\n")


def _thread_count() -> int:
    raw = os.environ.get("RAYCANOPY_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode() if not isinstance(p, bytes) else p)
        h.update(b"\x1f")
    return h.hexdigest()[:16]


def _config_subset(config: PipelineConfig, stage: str) -> tuple:
    c = config
    deps = {
        "ground": (c.curvature,),
        "rows": (c.curvature, c.bin_width, c.direction),
        "voxelize": (c.curvature, c.bin_width, c.direction, c.voxel_width, c.n_min),
        "density": (c.curvature, c.bin_width, c.direction, c.voxel_width, c.n_min,
                    c.g, c.estimator),
        "integrate": (c.curvature, c.bin_width, c.direction, c.voxel_width, c.n_min,
                      c.g, c.estimator, c.panel_length, c.row_spacing,
                      c.panel_mode, c.max_density),
    }
    return deps[stage]


class _Runner:
    """Holds pipeline state between stages and the cache bookkeeping."""

    def __init__(self, input_path, out_dir, config: PipelineConfig):
        self.input_path = Path(input_path)
        self.out = Path(out_dir)
        self.config = config
        self.out.mkdir(parents=True, exist_ok=True)
        self.input_hash = _hash(self.input_path.read_bytes())
        self.manifest = {"input": self.input_path.name, "config": asdict(config),
                         "stages": {}}
        self.timings: dict[str, float] = {}
        old = self.out / "manifest.json"
        self.previous = json.loads(old.read_text()) if old.exists() else {"stages": {}}

    def stage_hash(self, stage: str) -> str:
        return _hash(self.input_hash, stage, _config_subset(self.config, stage))

    def cached(self, stage: str) -> bool:
        prev = self.previous["stages"].get(stage)
        if prev is None or prev["hash"] != self.stage_hash(stage):
            return False
        return all((self.out / name).exists() for name in prev["outputs"])

    def record(self, stage: str, outputs: list[str]) -> None:
        self.manifest["stages"][stage] = {"hash": self.stage_hash(stage),
                                          "outputs": sorted(outputs)}

    def run_stage(self, stage: str, fn) -> None:
        start = time.perf_counter()
        before = set(p.name for p in self.out.iterdir())
        try:
            outputs = fn()
        except Exception as exc:
            # drop partial outputs so a failed run leaves no half-written files
            for p in self.out.iterdir():
                if p.name not in before:
                    p.unlink()
            raise PipelineError(stage, exc) from exc
        self.record(stage, outputs)
        self.timings[stage] = time.perf_counter() - start


def run_pipeline(input_path, out_dir, config: PipelineConfig | None = None) -> dict:
    """Run every stage over the input ray cloud; returns the manifest dict.

    Output files land in out_dir: ground mesh and flattened cloud, per-row
    clouds and density fields, integrated images, series and panel CSVs,
    manifest.json (deterministic) and timings.txt (wall-clock, separate so the
    manifest stays byte-identical across reruns).
    """
    config = config or PipelineConfig()
    r = _Runner(input_path, out_dir, config)
    state: dict = {}

    def ground_stage():
        cloud = load_raycloud(r.input_path)
        cloud.validate()
        mesh = ground_mod.extract_ground(cloud, k=config.curvature)
        flat, dropped = ground_mod.subtract_ground(mesh, cloud)
        ground_mod.export_obj(mesh, r.out / "ground_mesh.obj")
        save_raycloud(flat, r.out / "flattened.ply")
        state["flat"] = flat
        return ["ground_mesh.obj", "flattened.ply"]

    def ground_load():
        state["flat"] = load_raycloud(r.out / "flattened.ply")

    def rows_stage():
        flat = state["flat"]
        if config.direction is not None:
            direction = np.asarray(config.direction, dtype=float)
            direction = direction / np.linalg.norm(direction)
        else:
            traj = rows_mod.Trajectory.from_raycloud(flat)
            traj.validate()
            direction = rows_mod.row_direction(traj)
        segments = rows_mod.split_rows(flat, direction, bin_width=config.bin_width)
        outputs = []
        meta = {"direction": [float(direction[0]), float(direction[1])], "rows": []}
        state["row_clouds"] = {}
        for seg in segments:
            row_cloud = rows_mod.to_row_coordinates(seg)
            name = f"row{seg.index:02d}.ply"
            save_raycloud(row_cloud, r.out / name)
            meta["rows"].append({"index": seg.index, "file": name,
                                 "interval": [seg.lateral_interval[0],
                                              seg.lateral_interval[1]],
                                 "fallback": seg.fallback})
            state["row_clouds"][seg.index] = row_cloud
            outputs.append(name)
        (r.out / "rows.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        state["rows"] = meta["rows"]
        return outputs + ["rows.json"]

    def rows_load():
        meta = json.loads((r.out / "rows.json").read_text())
        state["rows"] = meta["rows"]
        state["row_clouds"] = {m["index"]: load_raycloud(r.out / m["file"])
                               for m in meta["rows"]}

    def voxelize_stage():
        outputs = []
        state["stats"] = {}

        def one(meta):
            idx = meta["index"]
            cloud = state["row_clouds"][idx]
            lo, hi = meta["interval"]
            half = (hi - lo) / 2
            try:
                grid = voxels_mod.build_grid(cloud, voxel_width=config.voxel_width,
                                             row_index=idx, lateral_bounds=(-half, half))
            except voxels_mod.VoxelGridError:
                return idx, None   # band without canopy returns (lane or edge strip)
            stats = voxels_mod.accumulate(cloud, grid)
            full = voxels_mod.expand_undersampled(stats, grid, n_min=config.n_min)
            return idx, (grid, full)

        with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
            results = list(pool.map(one, state["rows"]))
        for idx, payload in sorted(results):
            if payload is None:
                continue
            grid, full = payload
            name = f"row{idx:02d}_voxels.csv"
            voxels_mod.dump_stats_csv(full, grid, r.out / name)
            state["stats"][idx] = (grid, full)
            outputs.append(name)
        if not state["stats"]:
            raise voxels_mod.VoxelGridError("no row produced a voxel grid")
        return outputs

    def voxelize_load():
        state["stats"] = {}
        for meta in state["rows"]:
            path = r.out / f"row{meta['index']:02d}_voxels.csv"
            if path.exists():
                stats, grid = voxels_mod.load_stats_csv(path)
                state["stats"][meta["index"]] = (grid, stats)

    def density_stage():
        outputs = []
        state["fields"] = {}
        for idx, (grid, stats) in sorted(state["stats"].items()):
            field = density_mod.estimate_field(stats, grid, g=config.g,
                                               estimator=config.estimator)
            name = f"row{idx:02d}_density.rcdf"
            density_mod.save_field(field, r.out / name)
            state["fields"][idx] = field
            outputs.append(name)
        return outputs

    def density_load():
        state["fields"] = {}
        for meta in state["rows"]:
            path = r.out / f"row{meta['index']:02d}_density.rcdf"
            if path.exists():
                state["fields"][meta["index"]] = density_mod.load_field(path)

    def integrate_stage():
        outputs = []
        for idx, field in sorted(state["fields"].items()):
            tag = f"row{idx:02d}"
            image = report_mod.integrate_axis(field, "x")
            report_mod.render_colormap(image, config.max_density,
                                       r.out / f"{tag}_side.png")
            top = report_mod.integrate_axis(field, "z")
            report_mod.render_colormap(top, config.max_density,
                                       r.out / f"{tag}_top.png")
            series = report_mod.along_row_series(field)
            report_mod.export_series_csv(series, r.out / f"{tag}_series.csv")
            panels = report_mod.panel_aggregate(series, config.panel_length,
                                                mode=config.panel_mode)
            if config.row_spacing is not None:
                panels = report_mod.with_lai(panels, config.panel_length,
                                             config.row_spacing)
            report_mod.export_panels_csv(panels, r.out / f"{tag}_panels.csv",
                                         row_index=idx)
            outputs += [f"{tag}_side.png", f"{tag}_top.png",
                        f"{tag}_series.csv", f"{tag}_panels.csv"]
        return outputs

    loaders = {"ground": ground_load, "rows": rows_load,
               "voxelize": voxelize_load, "density": density_load,
               "integrate": lambda: None}
    runners = {"ground": ground_stage, "rows": rows_stage,
               "voxelize": voxelize_stage, "density": density_stage,
               "integrate": integrate_stage}
    for stage in STAGES:
        if r.cached(stage):
            loaders[stage]()
            r.manifest["stages"][stage] = r.previous["stages"][stage]
            r.timings[stage] = 0.0
        else:
            r.run_stage(stage, runners[stage])

    (r.out / "manifest.json").write_text(
        json.dumps(r.manifest, indent=1, sort_keys=True) + "\n")
    (r.out / "timings.txt").write_text(
        "".join(f"{k}\t{v:.3f}s\n" for k, v in r.timings.items()))
    return r.manifest
