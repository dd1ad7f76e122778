"""Synthetic vineyard scanner for end-to-end validation.

Generates ray clouds of a vineyard with known ground truth: undulating
terrain, parallel rows of a uniform turbid canopy (constant leaf density in a
terrain-following box per row), and a spinning sensor driven along the lanes
between rows. Because every quantity is known analytically, pipeline output
can be checked for absolute accuracy and scan-to-scan repeatability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raycloud import RayCloud

STEP = 0.025  # m, ray march resolution through the turbid canopy


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class VineyardSpec:
    """Ground-truth description of the simulated vineyard."""

    row_positions: tuple = (0.0, 2.5)   # x of each row centreline, m
    row_length: float = 28.0            # rows run along +y from y=0, m
    row_half_width: float = 0.35        # m
    canopy_base: float = 0.5            # above terrain, m
    canopy_top: float = 1.5             # above terrain, m
    density: float = 4.0                # one-sided leaf area, m^2/m^3
    g: float = 2.0
    terrain_amplitude: float = 0.12     # m
    max_range: float = 18.0             # m
    sensor_height: float = 1.0          # above terrain, m

    def __post_init__(self):
        if self.canopy_top <= self.canopy_base or self.density < 0:
            raise SyntheticError("invalid canopy band")

    @property
    def interception_density(self) -> float:
        return self.density / self.g   # lambda, 1/m

    def canopy_volume(self) -> float:
        return (len(self.row_positions) * self.row_length
                * 2 * self.row_half_width * (self.canopy_top - self.canopy_base))

    def total_leaf_area(self) -> float:
        return self.density * self.canopy_volume()

    def lane_positions(self) -> list[float]:
        """Drive lanes: midpoints between rows plus one outside each edge row."""
        rows = sorted(self.row_positions)
        spacing = rows[1] - rows[0] if len(rows) > 1 else 2.5
        lanes = [rows[0] - spacing / 2]
        lanes += [(a + b) / 2 for a, b in zip(rows, rows[1:])]
        lanes.append(rows[-1] + spacing / 2)
        return lanes


def terrain_height(spec: VineyardSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth undulating terrain; wavelengths well above the voxel scale."""
    a = spec.terrain_amplitude
    return (a * np.sin(2 * np.pi * np.asarray(x) / 19.0)
            + 0.7 * a * np.cos(2 * np.pi * np.asarray(y) / 13.0))


def _in_canopy(spec: VineyardSpec, x, y, h):
    """Boolean mask: inside any row's terrain-following canopy box.

    h is height above local terrain.
    """
    inside = (h >= spec.canopy_base) & (h < spec.canopy_top) \
        & (y >= 0.0) & (y < spec.row_length)
    lateral = np.zeros_like(np.asarray(x), dtype=bool)
    for rx in spec.row_positions:
        lateral |= np.abs(x - rx) < spec.row_half_width
    return inside & lateral


def scan_trajectory(spec: VineyardSpec, spacing: float
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Boustrophedon sensor positions over the lanes and their timestamps.

    `spacing` is the along-lane distance between scan positions: the knob that
    models vehicle speed at a fixed scanner rate.
    """
    if spacing <= 0:
        raise SyntheticError("spacing must be positive")
    margin = 1.0
    steps = int(np.ceil((spec.row_length + 2 * margin) / spacing)) + 1
    s = np.linspace(-margin, spec.row_length + margin, steps)
    positions = []
    for k, lane_x in enumerate(spec.lane_positions()):
        ys = s if k % 2 == 0 else s[::-1]
        xs = np.full_like(ys, lane_x)
        z = terrain_height(spec, xs, ys) + spec.sensor_height
        positions.append(np.column_stack([xs, ys, z]))
    positions = np.concatenate(positions)
    times = np.arange(len(positions)) * (spacing / 1.0)   # 1 m/s vehicle
    return positions, times


def _march_rays(spec: VineyardSpec, origins: np.ndarray, dirs: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Terminate each ray against terrain and the stochastic turbid canopy.

    Returns (endpoints, contact). A ray intercepts foliage where its
    accumulated optical depth first exceeds an Exp(1) draw, hits the ground
    where its height above terrain crosses zero, or (pointing upward) escapes
    to max_range as a non-return.
    """
    n = len(origins)
    endpoints = origins + spec.max_range * dirs
    contact = np.zeros(n, dtype=bool)
    u = rng.exponential(1.0, n)
    n_steps = int(np.ceil(spec.max_range / STEP))
    t_grid = (np.arange(n_steps) + 0.5) * STEP

    chunk = 20_000
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o = origins[lo:hi]
        d = dirs[lo:hi]
        x = o[:, 0:1] + t_grid[None, :] * d[:, 0:1]
        y = o[:, 1:2] + t_grid[None, :] * d[:, 1:2]
        z = o[:, 2:3] + t_grid[None, :] * d[:, 2:3]
        h = z - terrain_height(spec, x, y)

        below = h <= 0.0
        ground_step = np.where(below.any(axis=1), below.argmax(axis=1), n_steps)
        depth = np.cumsum(_in_canopy(spec, x, y, h), axis=1) * (
            spec.interception_density * STEP)
        hit = depth >= u[lo:hi, None]
        hit_step = np.where(hit.any(axis=1), hit.argmax(axis=1), n_steps)

        first = np.minimum(ground_step, hit_step)
        ended = first < n_steps
        t_end = (first[ended] + 0.5) * STEP
        idx = np.arange(lo, hi)[ended]
        endpoints[idx] = origins[idx] + t_end[:, None] * dirs[idx]
        contact[idx] = True
    return endpoints, contact


def simulate_scan(spec: VineyardSpec, spacing: float = 0.05,
                  rays_per_position: int = 120, seed: int = 0) -> RayCloud:
    """Scan the vineyard: spinning-sensor ray fan from each trajectory position.

    Azimuth is uniform over the full circle and elevation uniform in
    [-40, 55] degrees, biased upward so the canopy top stays well sampled.
    Downward non-returns (rays that somehow end above ground at max_range)
    are discarded, mirroring live sensor ingestion.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    positions, times = scan_trajectory(spec, spacing)
    n = len(positions) * rays_per_position
    origins = np.repeat(positions, rays_per_position, axis=0)
    ray_times = np.repeat(times, rays_per_position)
    ray_times = ray_times + np.tile(
        np.linspace(0.0, spacing * 0.9, rays_per_position), len(positions))

    az = rng.uniform(0.0, 2 * np.pi, n)
    el = rng.uniform(np.deg2rad(-40.0), np.deg2rad(55.0), n)
    dirs = np.column_stack([np.cos(el) * np.cos(az),
                            np.cos(el) * np.sin(az),
                            np.sin(el)])
    endpoints, contact = _march_rays(spec, origins, dirs, rng)

    keep = contact | (dirs[:, 2] > 0)
    order = np.argsort(ray_times[keep], kind="stable")
    return RayCloud(origins[keep][order], endpoints[keep][order],
                    ray_times[keep][order], contact[keep][order],
                    spec.max_range, "synthetic-vineyard")
