"""Top-down occupancy map with frontier extraction.

Cells are addressed as ``(x, y)``; channel arrays are indexed ``[y, x]``.
World coordinates put cell ``(x, y)`` centre at ``origin + (x + 0.5, y + 0.5) * resolution``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, OutOfBoundsError
from .rays import ray_table

Cell = tuple[int, int]

SENSOR_MIN_RANGE = 0.5
SENSOR_MAX_RANGE = 5.0
MIN_FRONTIER_SIZE = 4


@dataclass(frozen=True)
class GridConfig:
    width: int
    height: int
    resolution: float = 0.05
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ConfigurationError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if not self.resolution > 0:
            raise ConfigurationError(f"resolution must be positive, got {self.resolution}")

    @property
    def extent_m(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution


@dataclass(frozen=True)
class Pose:
    """Agent pose: metres, heading in degrees counter-clockwise from +x."""

    x: float
    y: float
    theta: float = 0.0


@dataclass(frozen=True)
class DepthScan:
    """Planar depth returns. ``angles`` are radians relative to the heading."""

    angles: np.ndarray
    ranges: np.ndarray
    min_range: float = SENSOR_MIN_RANGE
    max_range: float = SENSOR_MAX_RANGE


def scan_angles(fov_deg: float = 90.0, n_rays: int = 64) -> np.ndarray:
    half = math.radians(fov_deg) / 2.0
    if n_rays == 1:
        return np.zeros(1)
    return np.linspace(-half, half, n_rays)


@dataclass
class OccupancyGrid:
    config: GridConfig
    obstacle: np.ndarray
    explored: np.ndarray
    agent_trace: np.ndarray
    instance_label: np.ndarray  # -1 where unset

    @property
    def shape(self) -> tuple[int, int]:
        return self.obstacle.shape

    @property
    def resolution(self) -> float:
        return self.config.resolution

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.config.width and 0 <= cell[1] < self.config.height

    def world_to_cell(self, x: float, y: float) -> Cell:
        ox, oy = self.config.origin
        r = self.config.resolution
        return int(math.floor((x - ox) / r)), int(math.floor((y - oy) / r))

    def cell_to_world(self, cell: Cell) -> tuple[float, float]:
        ox, oy = self.config.origin
        r = self.config.resolution
        return ox + (cell[0] + 0.5) * r, oy + (cell[1] + 0.5) * r

    def traversable(self) -> np.ndarray:
        """Explored, non-obstacle cells. Unexplored space is never traversable."""
        return self.explored & ~self.obstacle

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.config, self.obstacle.copy(), self.explored.copy(),
                             self.agent_trace.copy(), self.instance_label.copy())

    def check_invariants(self) -> None:
        assert not np.any(self.obstacle & ~self.explored), "obstacle cell not explored"
        assert not np.any((self.instance_label >= 0) & ~self.explored), "label on unexplored cell"
        for arr in (self.obstacle, self.explored, self.agent_trace, self.instance_label):
            assert arr.shape == (self.config.height, self.config.width)


@dataclass(frozen=True)
class FrontierCluster:
    id: int
    cells: frozenset
    centroid: Cell
    size: int


def new_grid(config: GridConfig) -> OccupancyGrid:
    shape = (config.height, config.width)
    return OccupancyGrid(
        config=config,
        obstacle=np.zeros(shape, dtype=bool),
        explored=np.zeros(shape, dtype=bool),
        agent_trace=np.zeros(shape, dtype=bool),
        instance_label=np.full(shape, -1, dtype=np.int64),
    )


def _virtual_layout(angles: np.ndarray, max_range: float, resolution: float):
    """Fixed interpolation layout: for each adjacent measured pair, how many sub-rays."""
    subs = []
    for i in range(len(angles) - 1):
        gap = abs(float(angles[i + 1] - angles[i]))
        subs.append(max(1, math.ceil(max_range * gap / resolution)))
    return subs


def _expand_rays(scan: DepthScan, resolution: float):
    """Measured rays plus interpolated rays between continuous neighbouring returns."""
    angles = np.asarray(scan.angles, dtype=float)
    ranges = np.asarray(scan.ranges, dtype=float)
    ok = ranges > scan.min_range + 1e-9
    at_max = ranges >= scan.max_range - 1e-9
    out_a = [angles]
    out_r = [np.where(ok, ranges, np.nan)]
    for i, k in enumerate(_virtual_layout(angles, scan.max_range, resolution)):
        if k <= 1:
            continue
        fr = np.arange(1, k) / k
        a = angles[i] + fr * (angles[i + 1] - angles[i])
        r0, r1 = ranges[i], ranges[i + 1]
        cont = ok[i] and ok[i + 1] and (
            (at_max[i] and at_max[i + 1])
            or (not at_max[i] and not at_max[i + 1]
                and abs(r0 - r1) <= max(0.2, 0.1 * min(r0, r1))))
        out_a.append(a)
        out_r.append(r0 + fr * (r1 - r0) if cont else np.full(k - 1, np.nan))
    return np.concatenate(out_a), np.concatenate(out_r)


def integrate_observation(grid: OccupancyGrid, pose: Pose, scan: DepthScan,
                          interpolate: bool = True) -> OccupancyGrid:
    """Ray-cast a depth scan into the grid in place and return it.

    Cells a ray passes before its return are marked explored; the cell holding
    the return is marked as an obstacle unless the return is at maximum range.
    Obstacles are sticky. Between adjacent returns that are continuous in range
    extra rays are interpolated so that far-field gaps between rays stay covered.
    """
    cx, cy = grid.world_to_cell(pose.x, pose.y)
    if not grid.in_bounds((cx, cy)):
        raise OutOfBoundsError(f"pose ({pose.x:.3f}, {pose.y:.3f}) lies outside the grid")
    res = grid.config.resolution
    if interpolate and len(scan.angles) > 1:
        rel, rng = _expand_rays(scan, res)
    else:
        rel = np.asarray(scan.angles, dtype=float)
        rng = np.where(np.asarray(scan.ranges) > scan.min_range + 1e-9,
                       np.asarray(scan.ranges, dtype=float), np.nan)
    grid.agent_trace[cy, cx] = True
    use = ~np.isnan(rng)
    if not use.any():
        return grid
    base = math.radians(pose.theta % 360.0)
    table = ray_table(base + rel, scan.max_range / res + 2.0)
    r = np.where(use, rng, 0.0) / res
    max_cells = scan.max_range / res
    eps = 1e-7
    contains = table.valid & (table.t_in <= r[:, None] + eps) & (table.t_out >= r[:, None] - eps)
    hit_idx = np.argmax(contains, axis=1)
    has_hit = contains.any(axis=1) & use & (r < max_cells - eps)
    idx = np.arange(table.valid.shape[1])[None, :]
    free = np.where(has_hit[:, None], idx < hit_idx[:, None], table.t_in < r[:, None] - eps)
    free &= table.valid & use[:, None]
    xs = cx + table.dx
    ys = cy + table.dy
    inb = (xs >= 0) & (xs < grid.config.width) & (ys >= 0) & (ys < grid.config.height)
    # a ray that leaves the grid does not come back, but keep the mask explicit
    fm = free & inb
    grid.explored[ys[fm], xs[fm]] = True
    rows = np.nonzero(has_hit)[0]
    hx = xs[rows, hit_idx[rows]]
    hy = ys[rows, hit_idx[rows]]
    keep = (hx >= 0) & (hx < grid.config.width) & (hy >= 0) & (hy < grid.config.height)
    grid.explored[hy[keep], hx[keep]] = True
    grid.obstacle[hy[keep], hx[keep]] = True
    return grid


def mark_obstacle(grid: OccupancyGrid, cell: Cell) -> None:
    """Record a contact obstacle (bump) in the map."""
    if grid.in_bounds(cell):
        grid.explored[cell[1], cell[0]] = True
        grid.obstacle[cell[1], cell[0]] = True


def frontier_mask(grid: OccupancyGrid) -> np.ndarray:
    unk = ~grid.explored
    near = np.zeros_like(unk)
    near[1:, :] |= unk[:-1, :]
    near[:-1, :] |= unk[1:, :]
    near[:, 1:] |= unk[:, :-1]
    near[:, :-1] |= unk[:, 1:]
    return grid.explored & ~grid.obstacle & near


def frontier_cells(grid: OccupancyGrid) -> set[Cell]:
    """Explored free cells 4-adjacent to at least one unexplored cell."""
    ys, xs = np.nonzero(frontier_mask(grid))
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def label_groups(labels: np.ndarray, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(ys, xs)`` of every label 1..n in one pass, each in row-major order."""
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    return [(ys[bounds[k]:bounds[k + 1]], xs[bounds[k]:bounds[k + 1]]) for k in range(n)]


def cluster_frontiers(grid: OccupancyGrid, min_size: int = MIN_FRONTIER_SIZE) -> list[FrontierCluster]:
    """8-connected frontier components of at least ``min_size`` cells."""
    if min_size < 1:
        raise ConfigurationError("min_size must be >= 1")
    labels, n = ndimage.label(frontier_mask(grid), structure=np.ones((3, 3), dtype=bool))
    out: list[FrontierCluster] = []
    if n == 0:
        return out
    for ys, xs in label_groups(labels, n):
        if len(xs) < min_size:
            continue
        mx, my = xs.mean(), ys.mean()
        d2 = (xs - mx) ** 2 + (ys - my) ** 2
        j = int(np.argmin(d2))  # nonzero() is row-major, so ties go to the first cell
        cells = frozenset((int(x), int(y)) for x, y in zip(xs, ys))
        out.append(FrontierCluster(id=len(out), cells=cells,
                                   centroid=(int(xs[j]), int(ys[j])), size=len(cells)))
    return out


def paint_instances(grid: OccupancyGrid, footprints: dict[int, set]) -> None:
    """Refresh the instance channel from node footprints (explored cells only)."""
    grid.instance_label.fill(-1)
    for nid in sorted(footprints):
        cells = footprints[nid]
        if not cells:
            continue
        arr = np.asarray(sorted(cells), dtype=np.int64)
        xs, ys = arr[:, 0], arr[:, 1]
        ok = (xs >= 0) & (xs < grid.config.width) & (ys >= 0) & (ys < grid.config.height)
        xs, ys = xs[ok], ys[ok]
        ok = grid.explored[ys, xs]
        grid.instance_label[ys[ok], xs[ok]] = nid
