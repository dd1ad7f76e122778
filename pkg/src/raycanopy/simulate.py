"""Monte Carlo validation of the voxel density estimator.

Three families of experiment: 1D turbid-medium bias curves for the censored
exponential model, 3D triangular-leaf voxel trials, and a comparison of
trawling (push-broom) versus spinning lidar ray distributions over
anisotropic leaf-normal ellipsoids.

The triangular-leaf experiments are flattened across trials: all scenes of a
cell are generated as one triangle array, clipped in one pass, and ray/leaf
intersection runs over a single (ray, triangle) pair list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import debias_factor
from .voxels import VoxelStats

DEFAULT_G = 2.0
SPIN_MAX_ANGLE_DEG = 70.0
TRIANGLE_AREA_FACTOR = np.sqrt(3.0 / 4.0)   # area of unit-side equilateral triangle

# Fig 7(a) leaf configurations: (side length l [m], total leaf area A [m^2])
TRIANGLE_BIAS_CONFIGS = (
    (0.1, 0.012), (0.1, 0.04), (0.05, 0.003),
    (0.05, 0.01), (0.025, 0.012), (0.025, 0.001),
)
TABLE1_NORMAL_SPECS = ((10, 1, 1), (1, 10, 1), (1, 1, 10), (1, 1, 1))


class SimulationError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    # counter-based generator: reproducible and cheap to re-key
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True)
class TurbidConfig:
    """One cell of the 1D turbid-medium experiment."""

    lam: float            # true density, 1/m
    n: int                # rays per trial
    y: float = 1.0        # constant voxel depth, m
    trials: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.lam <= 0 or self.n < 1 or self.y <= 0:
            raise SimulationError("invalid turbid configuration")


@dataclass(frozen=True)
class NormalDistributionSpec:
    """Leaf-normal ellipsoid: draw from the axis-scaled sphere and normalise."""

    eccentricity: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if any(e <= 0 for e in self.eccentricity):
            raise SimulationError("eccentricity components must be positive")

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= np.asarray(self.eccentricity, dtype=float)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v


@dataclass(frozen=True)
class RayDistribution:
    """Ray sampling model inside the voxel."""

    kind: str = "uniform-random"         # or "trawling", "spinning"
    max_half_angle_deg: float = SPIN_MAX_ANGLE_DEG

    def __post_init__(self):
        if self.kind not in ("uniform-random", "trawling", "spinning"):
            raise SimulationError(f"unknown ray distribution {self.kind!r}")


@dataclass
class LeafScene:
    """Equilateral-triangle leaves inside one cubic voxel."""

    triangles: np.ndarray      # (T, 3, 3) vertex coordinates
    voxel_width: float
    true_density: float        # clipped one-sided area / voxel volume, m^2/m^3

    def validate(self) -> None:
        rho = clipped_area(self.triangles, self.voxel_width).sum() / self.voxel_width ** 3
        if abs(rho - self.true_density) > 1e-9:
            raise SimulationError("stored true_density disagrees with geometry")


# ---------------------------------------------------------------------------
# 1D turbid medium


def sample_turbid(config: TurbidConfig, rng: np.random.Generator | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial interception counts m and depths x for the censored model.

    Each ray draws an exponential(lambda) interception distance; draws longer
    than the voxel depth y are censored at y. Returns (m, x) with shapes
    (trials,) and (trials, n).
    """
    if rng is None:
        rng = make_rng(config.seed)
    draws = rng.exponential(1.0 / config.lam, size=(config.trials, config.n))
    intercepted = draws <= config.y
    x = np.where(intercepted, draws, config.y)
    return intercepted.sum(axis=1), x


def _turbid_estimates(m: np.ndarray, x: np.ndarray, estimator: str) -> np.ndarray:
    sum_x = x.sum(axis=1)
    n = x.shape[1]
    if estimator == "ml-mode":
        return np.maximum(m - 1, 0) / sum_x
    if estimator == "debiased":
        return debias_factor(n) * m / sum_x
    if estimator == "uncensored":
        # requires y = inf data: every ray intercepted
        return (n - 1) / sum_x
    raise SimulationError(f"unknown estimator {estimator!r}")


def bias_curves(lambda_grid, n_grid, trials: int, estimator: str,
                y: float = 1.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean normalised error (est - lam)/lam per (lambda, n) cell, with its
    standard error. `y = inf` disables censoring (for the unbiased estimator).
    """
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    n_grid = np.asarray(n_grid, dtype=int)
    err = np.zeros((len(lambda_grid), len(n_grid)))
    se = np.zeros_like(err)
    rng = make_rng(seed)
    for a, lam in enumerate(lambda_grid):
        for b, n in enumerate(n_grid):
            if np.isinf(y):
                x = rng.exponential(1.0 / lam, size=(trials, n))
                m = np.full(trials, n)
            else:
                m, x = sample_turbid(TurbidConfig(lam=lam, n=int(n), y=y, trials=trials),
                                     rng=rng)
            rel = (_turbid_estimates(m, x, estimator) - lam) / lam
            err[a, b] = rel.mean()
            se[a, b] = rel.std(ddof=1) / np.sqrt(trials)
    return err, se


# ---------------------------------------------------------------------------
# triangle-leaf geometry


def _triangle_vertices(centres: np.ndarray, normals: np.ndarray, phi: np.ndarray,
                       side: float) -> np.ndarray:
    """Equilateral triangles of the given side, centred and oriented as specified."""
    ref = np.where(np.abs(normals[:, 2:3]) < 0.9,
                   np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    u = np.cross(normals, ref)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    r = side / np.sqrt(3.0)   # circumradius
    angles = phi[:, None] + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])[None, :]
    return (centres[:, None, :]
            + r * (np.cos(angles)[..., None] * u[:, None, :]
                   + np.sin(angles)[..., None] * v[:, None, :]))


def clipped_area(triangles: np.ndarray, w: float) -> np.ndarray:
    """Area of each triangle clipped to the voxel box [0, w]^3.

    Sutherland-Hodgman against the six box planes, vectorised over all
    triangles with padded polygon arrays (a triangle gains at most one vertex
    per plane, so nine vertices suffice).
    """
    n_tri = len(triangles)
    if n_tri == 0:
        return np.zeros(0)
    max_v = 10
    polys = np.zeros((n_tri, max_v, 3))
    polys[:, :3] = triangles
    counts = np.full(n_tri, 3, dtype=np.int64)
    slots = np.arange(max_v)

    for axis in range(3):
        for sign, bound in ((1.0, 0.0), (-1.0, w)):
            valid = slots[None, :] < counts[:, None]
            nxt = slots[None, :] + 1
            nxt = np.where(nxt >= counts[:, None], 0, nxt)
            rows = np.arange(n_tri)[:, None]
            v_next = polys[rows, nxt]
            da = sign * (polys[:, :, axis] - bound)
            db = sign * (v_next[:, :, axis] - bound)
            keep_v = valid & (da >= 0)
            crossing = valid & ((da >= 0) != (db >= 0))
            denom = np.where(crossing, da - db, 1.0)
            inter = polys + (v_next - polys) * (da / denom)[..., None]

            flags = np.stack([keep_v, crossing], axis=2).reshape(n_tri, 2 * max_v)
            cand = np.stack([polys, inter], axis=2).reshape(n_tri, 2 * max_v, 3)
            pos = np.cumsum(flags, axis=1) - 1
            counts = flags.sum(axis=1)
            out = np.zeros_like(polys)
            r_idx, c_idx = np.nonzero(flags)
            out[r_idx, pos[r_idx, c_idx]] = cand[r_idx, c_idx]
            polys = out

    v0 = polys[:, 0]
    cross_sum = np.zeros((n_tri, 3))
    for i in range(1, max_v - 1):
        mask = (i + 1) < counts
        if not np.any(mask):
            break
        cross_sum[mask] += np.cross(polys[mask, i] - v0[mask],
                                    polys[mask, i + 1] - v0[mask])
    return 0.5 * np.linalg.norm(cross_sum, axis=1)


def gen_leaf_scene(w: float, side: float, area_target: float,
                   normals: NormalDistributionSpec, rng: np.random.Generator) -> LeafScene:
    """Sample a leaf scene with the requested expected total leaf area.

    The leaf count is Poisson around area_target / triangle area (a spatial
    Poisson process implies Poisson counts); the realised density is measured
    from the clipped geometry, so the sampling choice cannot bias validation.
    """
    if w <= 0 or side <= 0 or area_target < 0:
        raise SimulationError("scene parameters must be positive")
    mean_count = area_target / (TRIANGLE_AREA_FACTOR * side ** 2)
    count = int(rng.poisson(mean_count)) if mean_count > 0 else 0
    if count == 0:
        return LeafScene(np.zeros((0, 3, 3)), w, 0.0)
    centres = rng.uniform(0.0, w, size=(count, 3))
    n_vec = normals.sample(count, rng)
    phi = rng.uniform(0.0, 2 * np.pi, count)
    tris = _triangle_vertices(centres, n_vec, phi, side)
    rho = float(clipped_area(tris, w).sum() / w ** 3)
    return LeafScene(tris, w, rho)


def _moller(starts, dirs, v0, v1, v2):
    """Pairwise ray/triangle test; returns (hit mask, distance along ray)."""
    e1 = v1 - v0
    e2 = v2 - v0
    h = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = starts - v0
    u = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = inv * np.einsum("ij,ij->i", dirs, q)
    t = inv * np.einsum("ij,ij->i", e2, q)
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return hit, t


def _rays_uniform_chords(count: int, w: float, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random chords: endpoint pairs uniform on the voxel surface (distinct faces)."""
    def surface_points(k):
        face = rng.integers(0, 6, k)
        uv = rng.uniform(0.0, w, size=(k, 2))
        pts = np.empty((k, 3))
        axis = face // 2
        side = (face % 2).astype(float) * w
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            pts[sel, a] = side[sel]
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts, face

    p1, f1 = surface_points(count)
    p2, f2 = surface_points(count)
    bad = f1 == f2
    while np.any(bad):   # same-face chords lie on the surface; resample them
        k = int(bad.sum())
        p2[bad], f2[bad] = surface_points(k)
        bad = f1 == f2
    delta = p2 - p1
    chord = np.linalg.norm(delta, axis=1)
    dirs = delta / chord[:, None]
    return p1, dirs, chord


def _rays_trawling(count: int, w: float, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    starts = np.column_stack([np.zeros(count),
                              rng.uniform(0.0, w, count), rng.uniform(0.0, w, count)])
    dirs = np.tile(np.array([1.0, 0.0, 0.0]), (count, 1))
    return starts, dirs, np.full(count, w)


def _rays_spinning(count: int, w: float, rng,
                   max_angle_deg: float = SPIN_MAX_ANGLE_DEG):
    """Uniform field of horizontal rays, angle 0..max from the +x axis.

    Each ray is a uniformly offset chord of the square cross-section (not a
    point on the inflow face), matching a distant scanner sweeping the voxel.
    """
    theta = rng.uniform(0.0, np.deg2rad(max_angle_deg), count)
    theta *= rng.choice((-1.0, 1.0), count)
    d2 = np.column_stack([np.cos(theta), np.sin(theta)])
    perp = np.column_stack([-d2[:, 1], d2[:, 0]])
    corners = np.array([[0.0, 0.0], [w, 0.0], [0.0, w], [w, w]])
    proj = perp @ corners.T                      # (count, 4)
    offset = rng.uniform(proj.min(axis=1), proj.max(axis=1))
    p0 = offset[:, None] * perp
    # clip the 2D line p0 + t*d2 to the square
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (0.0 - p0) / d2
        t_hi = (w - p0) / d2
    near = np.where(d2 != 0, np.minimum(t_lo, t_hi), -np.inf)
    far = np.where(d2 != 0, np.maximum(t_lo, t_hi), np.inf)
    t0 = near.max(axis=1)
    t1 = far.min(axis=1)
    chord = np.maximum(t1 - t0, 0.0)
    degenerate = chord <= 1e-12
    while np.any(degenerate):   # grazing offsets: resample
        k = int(degenerate.sum())
        s2, d2k, c2 = _rays_spinning(k, w, rng, max_angle_deg)
        start2 = s2
        p0[degenerate] = start2[:, :2] - 0.0
        d2[degenerate] = d2k[:, :2]
        t0[degenerate] = 0.0
        chord[degenerate] = c2
        degenerate = chord <= 1e-12
    xy0 = p0 + t0[:, None] * d2
    starts = np.column_stack([xy0, rng.uniform(0.0, w, count)])
    dirs = np.column_stack([d2, np.zeros(count)])
    return starts, dirs, chord


def _make_rays(dist: RayDistribution, count: int, w: float, rng):
    if dist.kind == "trawling":
        return _rays_trawling(count, w, rng)
    if dist.kind == "spinning":
        return _rays_spinning(count, w, rng, dist.max_half_angle_deg)
    return _rays_uniform_chords(count, w, rng)


def cast_rays(scene: LeafScene, dist: RayDistribution, n: int,
              rng: np.random.Generator) -> VoxelStats:
    """Trace n rays through the scene's voxel and collect VoxelStats.

    The unimpeded path y is the chord through the voxel; the nearest
    ray/triangle intersection inside the voxel sets the penetration depth x
    and counts as a contact.
    """
    starts, dirs, chord = _make_rays(dist, n, scene.voxel_width, rng)
    x = chord.copy()
    if len(scene.triangles):
        n_tri = len(scene.triangles)
        ray_idx = np.repeat(np.arange(n), n_tri)
        tri_idx = np.tile(np.arange(n_tri), n)
        hit, t = _moller(starts[ray_idx], dirs[ray_idx],
                         scene.triangles[tri_idx, 0],
                         scene.triangles[tri_idx, 1],
                         scene.triangles[tri_idx, 2])
        valid = hit & (t >= 0.0) & (t <= chord[ray_idx])
        t_near = np.full(n, np.inf)
        np.minimum.at(t_near, ray_idx, np.where(valid, t, np.inf))
        hit_mask = t_near < chord
        x = np.where(hit_mask, t_near, chord)
    else:
        hit_mask = np.zeros(n, dtype=bool)
    stats = VoxelStats(n=n, m=int(hit_mask.sum()), x=x, y=chord)
    stats.validate(scene.voxel_width)
    return stats


# ---------------------------------------------------------------------------
# flattened multi-trial engine for the 3D experiments


def _simulate_cell(w: float, side: float, area: float, n: int, trials: int,
                   dist: RayDistribution, normals: NormalDistributionSpec,
                   rng: np.random.Generator, g: float = DEFAULT_G,
                   debias: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial (estimated density, true density) for one experiment cell."""
    mean_count = area / (TRIANGLE_AREA_FACTOR * side ** 2)
    counts = rng.poisson(mean_count, trials)
    total = int(counts.sum())
    trial_of_tri = np.repeat(np.arange(trials), counts)

    if total:
        centres = rng.uniform(0.0, w, size=(total, 3))
        n_vec = normals.sample(total, rng)
        phi = rng.uniform(0.0, 2 * np.pi, total)
        tris = _triangle_vertices(centres, n_vec, phi, side)
        area_clipped = clipped_area(tris, w)
        rho = np.bincount(trial_of_tri, weights=area_clipped, minlength=trials) / w ** 3
    else:
        tris = np.zeros((0, 3, 3))
        rho = np.zeros(trials)

    n_rays = trials * n
    starts, dirs, chord = _make_rays(dist, n_rays, w, rng)
    trial_of_ray = np.repeat(np.arange(trials), n)

    x = chord.copy()
    if total:
        pairs_per_ray = counts[trial_of_ray]
        ray_idx = np.repeat(np.arange(n_rays), pairs_per_ray)
        tri_start = np.concatenate([[0], np.cumsum(counts)])[:-1]
        # triangle ids of each pair: offsets within the ray's trial block
        offs = np.arange(pairs_per_ray.sum()) - np.repeat(
            np.concatenate([[0], np.cumsum(pairs_per_ray)])[:-1], pairs_per_ray)
        tri_idx = tri_start[trial_of_ray[ray_idx]] + offs
        hit, t = _moller(starts[ray_idx], dirs[ray_idx],
                         tris[tri_idx, 0], tris[tri_idx, 1], tris[tri_idx, 2])
        valid = hit & (t >= 0.0) & (t <= chord[ray_idx])
        t_near = np.full(n_rays, np.inf)
        np.minimum.at(t_near, ray_idx, np.where(valid, t, np.inf))
        hit_mask = t_near < chord
        x = np.where(hit_mask, t_near, chord)
    else:
        hit_mask = np.zeros(n_rays, dtype=bool)

    m = np.bincount(trial_of_ray, weights=hit_mask.astype(float), minlength=trials)
    sum_x = np.bincount(trial_of_ray, weights=x, minlength=trials)
    lam_hat = m / sum_x
    scale = g * (debias_factor(n) if debias else 1.0)
    return scale * lam_hat, rho


def _normalised_error(est: np.ndarray, rho: np.ndarray) -> float:
    truth = rho.mean()
    if truth == 0:   # degenerate cell: no leaves realised in any trial
        return float("nan")
    return float((est.mean() - truth) / truth)


def triangle_bias_experiment(configs=TRIANGLE_BIAS_CONFIGS, n_values=range(2, 15),
                             trials: int = 4000, w: float = 0.1, g: float = DEFAULT_G,
                             seed: int = 0) -> dict:
    """Normalised error of the raw (undebiased) estimator per (config, n).

    Returns {"configs", "n_values", "error" (configs x n), "reference"} where
    reference is the expected bias curve 1/(n-1) the errors should track.
    """
    n_values = list(n_values)
    rng = make_rng(seed)
    dist = RayDistribution("uniform-random")
    normals = NormalDistributionSpec()
    err = np.zeros((len(configs), len(n_values)))
    for ci, (side, area) in enumerate(configs):
        for ni, n in enumerate(n_values):
            est, rho = _simulate_cell(w, side, area, int(n), trials, dist, normals,
                                      rng, g=g, debias=False)
            err[ci, ni] = _normalised_error(est, rho)
    reference = np.array([1.0 / (n - 1) for n in n_values])
    return {"configs": list(configs), "n_values": n_values,
            "error": err, "reference": reference}


def debiased_error_surface(l_values=None, a_values=None, n: int = 20,
                           trials: int = 1600, w: float = 0.1, g: float = DEFAULT_G,
                           seed: int = 0) -> dict:
    """Normalised error surface of the debiased estimator over (l, A)."""
    if l_values is None:
        l_values = np.linspace(0.025, 0.10, 7)
    if a_values is None:
        a_values = np.linspace(0.001, 0.031, 7)
    rng = make_rng(seed)
    dist = RayDistribution("uniform-random")
    normals = NormalDistributionSpec()
    err = np.zeros((len(l_values), len(a_values)))
    for li, side in enumerate(l_values):
        for ai, area in enumerate(a_values):
            est, rho = _simulate_cell(w, float(side), float(area), n, trials, dist,
                                      normals, rng, g=g, debias=True)
            err[li, ai] = _normalised_error(est, rho)
    return {"l_values": np.asarray(l_values), "a_values": np.asarray(a_values),
            "error": err}


def trawl_vs_spin(normal_specs=TABLE1_NORMAL_SPECS, n: int = 50, trials: int = 400,
                  side: float = 0.06, area: float = 0.02, w: float = 0.1,
                  g: float = DEFAULT_G, seed: int = 0) -> dict:
    """Percentage density error per (leaf-normal ellipsoid, ray distribution)."""
    rng = make_rng(seed)
    table = np.zeros((len(normal_specs), 2))
    for si, spec in enumerate(normal_specs):
        normals = NormalDistributionSpec(tuple(float(e) for e in spec))
        for di, kind in enumerate(("trawling", "spinning")):
            est, rho = _simulate_cell(w, side, area, n, trials,
                                      RayDistribution(kind), normals, rng, g=g)
            table[si, di] = 100.0 * _normalised_error(est, rho)
    return {"normal_specs": list(normal_specs),
            "distributions": ("trawling", "spinning"), "error_percent": table}
