"""Per-row voxel grid, ray traversal and sufficient-statistic accumulation.

Each voxel records the entering-ray count n, the contact count m, and the
per-ray penetration depths x_i and unimpeded path lengths y_i that feed the
density estimator. Voxel intervals are half-open: a point exactly on a face
belongs to the voxel with the larger index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raycloud import RayCloud

DEFAULT_VOXEL_WIDTH = 0.12  # m
DEFAULT_N_MIN = 10
MIN_CONTACTS = 100
_EPS = 1e-12


class VoxelGridError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned cuboidal grid of cubic voxels."""

    origin: np.ndarray           # (3,) min corner, metres
    voxel_width: float
    dims: tuple[int, int, int]
    row_index: int = 0

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.voxel_width

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    def index_of(self, point: np.ndarray) -> tuple[int, int, int]:
        ijk = np.floor((np.asarray(point) - self.origin) / self.voxel_width).astype(int)
        return tuple(int(v) for v in ijk)

    def linear(self, ijk) -> int:
        i, j, k = ijk
        return (i * self.dims[1] + j) * self.dims[2] + k

    def unlinear(self, lin: int) -> tuple[int, int, int]:
        k = lin % self.dims[2]
        j = (lin // self.dims[2]) % self.dims[1]
        i = lin // (self.dims[1] * self.dims[2])
        return (int(i), int(j), int(k))

    def contains_index(self, ijk) -> bool:
        return all(0 <= v < d for v, d in zip(ijk, self.dims))


@dataclass
class VoxelStats:
    """Sufficient statistics of the rays crossing one voxel.

    The per-ray lists x and y are None for aggregate-only statistics (merged
    neighbourhoods), where only the counts and sums are meaningful.
    """

    n: int = 0
    m: int = 0
    x: np.ndarray | None = field(default_factory=lambda: np.zeros(0))  # penetration depths
    y: np.ndarray | None = field(default_factory=lambda: np.zeros(0))  # unimpeded chords
    _sum_x: float | None = None
    _sum_y: float | None = None

    @property
    def sum_x(self) -> float:
        return float(self.x.sum()) if self.x is not None else self._sum_x

    @property
    def sum_y(self) -> float:
        return float(self.y.sum()) if self.y is not None else self._sum_y

    @staticmethod
    def aggregate(n: int, m: int, sum_x: float, sum_y: float) -> "VoxelStats":
        return VoxelStats(n=n, m=m, x=None, y=None, _sum_x=sum_x, _sum_y=sum_y)

    def validate(self, voxel_width: float | None = None) -> None:
        if not (0 <= self.m <= self.n):
            raise VoxelGridError(f"m={self.m} out of range for n={self.n}")
        if self.x is None:
            if not (0 <= self._sum_x <= self._sum_y + 1e-9):
                raise VoxelGridError("aggregate sums must satisfy 0 <= sum_x <= sum_y")
            return
        if len(self.x) != self.n or len(self.y) != self.n:
            raise VoxelGridError("depth/path list lengths must equal n")
        if np.any(self.x < -_EPS) or np.any(self.x > self.y + 1e-9):
            raise VoxelGridError("penetration depths must satisfy 0 <= x_i <= y_i")
        if voxel_width is not None and np.any(self.y > np.sqrt(3) * voxel_width + 1e-9):
            raise VoxelGridError("path length exceeds voxel diagonal")

    @staticmethod
    def merged(parts: list["VoxelStats"]) -> "VoxelStats":
        if any(p.x is None for p in parts):
            return VoxelStats.aggregate(
                n=sum(p.n for p in parts), m=sum(p.m for p in parts),
                sum_x=sum(p.sum_x for p in parts), sum_y=sum(p.sum_y for p in parts))
        xs = [p.x for p in parts if p.n]
        ys = [p.y for p in parts if p.n]
        return VoxelStats(
            n=sum(p.n for p in parts),
            m=sum(p.m for p in parts),
            x=np.concatenate(xs) if xs else np.zeros(0),
            y=np.concatenate(ys) if ys else np.zeros(0),
        )


def build_grid(row_cloud: RayCloud, voxel_width: float = DEFAULT_VOXEL_WIDTH,
               row_index: int = 0,
               lateral_bounds: tuple[float, float] | None = None) -> VoxelGrid:
    """Build the row's voxel grid from endpoint percentiles.

    Vertical extent runs from 0.30 m up to the 97th percentile of contact
    endpoint heights, lateral from the 2nd to 98th percentile of contact
    endpoint x, along-row covering all contact endpoints; each extent is
    rounded outward (upward) to a whole number of voxels. `lateral_bounds`
    restricts the grid (and the percentile statistics) to the row's own
    across-row band, keeping neighbouring rows' returns out.
    """
    if voxel_width <= 0:
        raise VoxelGridError("voxel_width must be positive")
    pts = row_cloud.endpoints[row_cloud.contact]
    if lateral_bounds is not None:
        blo, bhi = lateral_bounds
        pts = pts[(pts[:, 0] >= blo) & (pts[:, 0] < bhi)]
    if len(pts) < MIN_CONTACTS:
        raise VoxelGridError(f"need >= {MIN_CONTACTS} contact endpoints, got {len(pts)}")
    z_lo = 0.30
    z_hi = float(np.percentile(pts[:, 2], 97))
    x_lo = float(np.percentile(pts[:, 0], 2))
    x_hi = float(np.percentile(pts[:, 0], 98))
    if lateral_bounds is not None:
        x_lo = max(x_lo, blo)
        x_hi = min(x_hi, bhi)
    y_lo = float(pts[:, 1].min())
    y_hi = float(pts[:, 1].max())
    spans = [(x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi)]
    dims = []
    for lo, hi in spans:
        if hi <= lo:
            raise VoxelGridError(f"non-positive grid extent [{lo}, {hi}]")
        dims.append(int(np.ceil((hi - lo) / voxel_width - 1e-9)))
    return VoxelGrid(origin=np.array([x_lo, y_lo, z_lo]), voxel_width=voxel_width,
                     dims=tuple(dims), row_index=row_index)


def _clip_to_grid(origins: np.ndarray, deltas: np.ndarray, grid: VoxelGrid):
    """Slab-clip rays (p = o + t*delta, t in [0,1]) to the grid box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / deltas
        t_lo = (grid.origin - origins) * inv
        t_hi = (grid.upper - origins) * inv
    t_near = np.where(deltas != 0, np.minimum(t_lo, t_hi), -np.inf)
    t_far = np.where(deltas != 0, np.maximum(t_lo, t_hi), np.inf)
    # zero-direction axes hit nothing if the origin lies outside the slab
    outside = (deltas == 0) & ((origins < grid.origin) | (origins > grid.upper))
    t_near = np.where(outside, np.inf, t_near)
    t0 = np.maximum(t_near.max(axis=1), 0.0)
    t1 = np.minimum(t_far.min(axis=1), 1.0)
    return t0, t1


def traverse(ray, grid: VoxelGrid) -> list[tuple[tuple[int, int, int], float, float]]:
    """Amanatides-Woo walk of one ray through the grid.

    Returns ordered (voxel index, entry_param, exit_param) with parameters as
    fractions of the full ray; contiguous, and empty if the ray misses.
    """
    origin = np.asarray(ray.origin, dtype=float)
    delta = np.asarray(ray.endpoint, dtype=float) - origin
    t0, t1 = _clip_to_grid(origin[None, :], delta[None, :], grid)
    t0, t1 = float(t0[0]), float(t1[0])
    if t1 - t0 <= _EPS:
        return []
    w = grid.voxel_width
    p0 = origin + t0 * delta
    ijk = np.floor((p0 - grid.origin) / w).astype(int)
    ijk = np.clip(ijk, 0, np.asarray(grid.dims) - 1)

    step = np.where(delta > 0, 1, np.where(delta < 0, -1, 0))
    with np.errstate(divide="ignore"):
        t_delta = np.where(delta != 0, np.abs(w / delta), np.inf)
        next_bound = grid.origin + (ijk + (step > 0)) * w
        t_max = np.where(delta != 0, (next_bound - origin) / delta, np.inf)

    out = []
    t = t0
    while True:
        t_exit = float(t_max.min())
        t_emit = min(t_exit, t1)
        if t_emit - t > _EPS:
            out.append((tuple(int(v) for v in ijk), t, t_emit))
        if t_exit >= t1:
            break
        # advance every axis tied at the minimum (diagonal face/corner crossing)
        for ax in range(3):
            if t_max[ax] == t_exit:
                ijk[ax] += step[ax]
                t_max[ax] += t_delta[ax]
        if not grid.contains_index(ijk):
            break
        t = t_exit
    return out


def accumulate(row_cloud: RayCloud, grid: VoxelGrid) -> dict[tuple[int, int, int], VoxelStats]:
    """Accumulate per-voxel statistics for every ray of the cloud.

    For each voxel a ray enters: n += 1 and y is the unimpeded chord through
    the voxel. x equals y except in the voxel where the ray ends, where it is
    the entry-to-end length; a contact ending inside the voxel increments m.
    The walk is batch-vectorised across rays; output is independent of ray
    processing order.
    """
    n_rays = len(row_cloud)
    if n_rays == 0:
        return {}
    origins = row_cloud.origins
    deltas = row_cloud.endpoints - origins
    lengths = np.linalg.norm(deltas, axis=1)
    w = grid.voxel_width
    dims = np.asarray(grid.dims)

    t0, t_end = _clip_to_grid(origins, deltas, grid)
    active = t_end - t0 > _EPS
    ids = np.nonzero(active)[0]
    if len(ids) == 0:
        return {}
    o = origins[ids]
    d = deltas[ids]
    t = t0[ids].copy()
    tend = t_end[ids]

    p0 = o + t[:, None] * d
    ijk = np.floor((p0 - grid.origin) / w).astype(np.int64)
    np.clip(ijk, 0, dims - 1, out=ijk)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, np.abs(w / d), np.inf)
        next_bound = grid.origin + (ijk + (step > 0)) * w
        t_max = np.where(d != 0, (next_bound - o) / d, np.inf)

    rec_ray: list[np.ndarray] = []
    rec_vox: list[np.ndarray] = []
    rec_t0: list[np.ndarray] = []
    rec_t1: list[np.ndarray] = []

    alive = np.ones(len(ids), dtype=bool)
    while np.any(alive):
        a = np.nonzero(alive)[0]
        t_exit = t_max[a].min(axis=1)
        t_emit = np.minimum(t_exit, tend[a])
        emit = t_emit - t[a] > _EPS
        if np.any(emit):
            e = a[emit]
            lin = (ijk[e, 0] * dims[1] + ijk[e, 1]) * dims[2] + ijk[e, 2]
            rec_ray.append(ids[e])
            rec_vox.append(lin)
            rec_t0.append(t[e])
            rec_t1.append(t_exit[emit])   # uncapped: unimpeded chord exit
        done = t_exit >= tend[a]
        adv = a[~done]
        if len(adv):
            tied = t_max[adv] == t_max[adv].min(axis=1, keepdims=True)
            ijk[adv] += np.where(tied, step[adv], 0)
            t_max[adv] += np.where(tied, t_delta[adv], 0.0)
            t[adv] = t_exit[~done]
            inside = np.all((ijk[adv] >= 0) & (ijk[adv] < dims), axis=1)
            alive[adv[~inside]] = False
        alive[a[done]] = False

    if not rec_ray:
        return {}
    ray_id = np.concatenate(rec_ray)
    vox = np.concatenate(rec_vox)
    ta = np.concatenate(rec_t0)
    tb = np.concatenate(rec_t1)

    L = lengths[ray_id]
    y = (tb - ta) * L
    x = (np.minimum(tb, t_end[ray_id]) - ta) * L
    np.clip(x, 0.0, y, out=x)
    end_lin = np.full(n_rays, -1, dtype=np.int64)
    in_grid = np.all((row_cloud.endpoints >= grid.origin)
                     & (row_cloud.endpoints < grid.upper), axis=1)
    if np.any(in_grid):
        eijk = np.floor((row_cloud.endpoints[in_grid] - grid.origin) / w).astype(np.int64)
        end_lin[in_grid] = (eijk[:, 0] * dims[1] + eijk[:, 1]) * dims[2] + eijk[:, 2]
    hits = row_cloud.contact[ray_id] & (vox == end_lin[ray_id])

    order = np.argsort(vox, kind="stable")  # stable: per-voxel lists keep ray order
    vox, ray_id = vox[order], ray_id[order]
    x, y, hits = x[order], y[order], hits[order]
    stats: dict[tuple[int, int, int], VoxelStats] = {}
    uniq, starts = np.unique(vox, return_index=True)
    bounds = np.append(starts, len(vox))
    for u, s0, s1 in zip(uniq, bounds[:-1], bounds[1:]):
        stats[grid.unlinear(int(u))] = VoxelStats(
            n=int(s1 - s0), m=int(hits[s0:s1].sum()),
            x=x[s0:s1].copy(), y=y[s0:s1].copy())
    return stats


def _shell_offsets(radius: int) -> np.ndarray:
    """Integer offsets at exactly Chebyshev distance `radius`."""
    rng = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    cheb = np.abs(grid).max(axis=1)
    return grid[cheb == radius]


def _window_sums(prefix: np.ndarray, radius: int, dims) -> np.ndarray:
    """Sum over the cube of Chebyshev radius `radius` around every voxel,
    clamped to the grid, from an inclusive 3D prefix-sum array."""
    idx = [np.arange(d) for d in dims]
    lo = [np.clip(ix - radius, 0, d - 1) for ix, d in zip(idx, dims)]
    hi = [np.clip(ix + radius, 0, d - 1) + 1 for ix, d in zip(idx, dims)]
    L0, L1, L2 = np.ix_(lo[0], lo[1], lo[2])
    H0, H1, H2 = np.ix_(hi[0], hi[1], hi[2])
    return (prefix[H0, H1, H2] - prefix[L0, H1, H2] - prefix[H0, L1, H2]
            - prefix[H0, H1, L2] + prefix[L0, L1, H2] + prefix[L0, H1, L2]
            + prefix[H0, L1, L2] - prefix[L0, L1, L2])


def expand_undersampled(stats: dict, grid: VoxelGrid,
                        n_min: int = DEFAULT_N_MIN) -> dict[tuple[int, int, int], VoxelStats]:
    """Merge growing cubic neighbourhoods into voxels with n < n_min.

    The merged statistics replace the voxel's own for density estimation only;
    neighbours keep theirs. Covers every voxel of the grid, so unsampled
    voxels deep in the canopy borrow from their surroundings; voxels with
    n = 0 after exhausting the grid stay empty (unobserved). The search uses
    prefix sums, so cost is linear in grid size per radius step.
    """
    dims = grid.dims
    n_arr = np.zeros(dims, dtype=np.int64)
    m_arr = np.zeros(dims, dtype=np.int64)
    sx = np.zeros(dims)
    sy = np.zeros(dims)
    for key, s in stats.items():
        n_arr[key] = s.n
        m_arr[key] = s.m
        sx[key] = s.sum_x
        sy[key] = s.sum_y

    fields = [n_arr.astype(float), m_arr.astype(float), sx, sy]
    prefixes = [np.pad(f, (1, 0)).cumsum(0).cumsum(1).cumsum(2) for f in fields]

    radius = np.full(dims, -1, dtype=np.int64)   # -1: not yet satisfied
    radius[n_arr >= n_min] = 0
    max_radius = max(dims) - 1
    for r in range(1, max_radius + 1):
        pending = radius < 0
        if not np.any(pending):
            break
        enough = _window_sums(prefixes[0], r, dims) >= n_min
        radius[pending & enough] = r

    out: dict[tuple[int, int, int], VoxelStats] = {}
    merged_cache: dict[int, list[np.ndarray]] = {}
    for key in np.ndindex(*dims):
        r = int(radius[key])
        if r == 0:
            out[key] = stats[key]
            continue
        if r < 0:
            r = max_radius   # whole grid still short of n_min: take everything
        if r not in merged_cache:
            merged_cache[r] = [_window_sums(p, r, dims) for p in prefixes]
        wn, wm, wsx, wsy = (w[key] for w in merged_cache[r])
        if wn == 0:
            out[key] = VoxelStats()   # unobserved even after full expansion
        else:
            out[key] = VoxelStats.aggregate(int(round(wn)), int(round(wm)),
                                            float(wsx), float(wsy))
    return out


def dump_stats_csv(stats: dict, grid: VoxelGrid, path) -> None:
    """One row per voxel with counts and depth/path sums, plus the grid header."""
    with open(path, "w") as f:
        f.write(f"# grid {grid.origin[0]:.9g} {grid.origin[1]:.9g} {grid.origin[2]:.9g} "
                f"{grid.voxel_width:.9g} {grid.dims[0]} {grid.dims[1]} {grid.dims[2]} "
                f"{grid.row_index}\n")
        f.write("row,i,j,k,n,m,sum_x,sum_y\n")
        for (i, j, k) in sorted(stats):
            s = stats[(i, j, k)]
            f.write(f"{grid.row_index},{i},{j},{k},{s.n},{s.m},"
                    f"{s.sum_x:.9g},{s.sum_y:.9g}\n")


def load_stats_csv(path) -> tuple[dict[tuple[int, int, int], VoxelStats], VoxelGrid]:
    """Read a dump_stats_csv file back as aggregate statistics plus its grid."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 10 or header[:2] != ["#", "grid"]:
            raise VoxelGridError(f"{path}: missing grid header")
        origin = np.array([float(v) for v in header[2:5]])
        width = float(header[5])
        dims = tuple(int(v) for v in header[6:9])
        grid = VoxelGrid(origin=origin, voxel_width=width, dims=dims,
                         row_index=int(header[9]))
        f.readline()   # column names
        stats = {}
        for line in f:
            parts = line.split(",")
            key = (int(parts[1]), int(parts[2]), int(parts[3]))
            stats[key] = VoxelStats.aggregate(int(parts[4]), int(parts[5]),
                                              float(parts[6]), float(parts[7]))
    return stats, grid
