"""Procedural 2.5D indoor gridworld with a noisy perception oracle."""

from __future__ import annotations

import bisect
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from json.decoder import WHITESPACE, WHITESPACE_STR, JSONDecodeError, JSONObject
from json.scanner import py_make_scanner
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra as cs_dijkstra

from .errors import GenerationError, InvalidPoseError
from .occupancy import Cell, DepthScan, GridConfig, Pose, SENSOR_MAX_RANGE, SENSOR_MIN_RANGE, scan_angles
from .rays import ray_table, segment_cells
from .scene_graph import Correction, Detection, SceneGraph

GOAL_CATEGORIES = ("sofa", "bed", "chair", "plant", "toilet", "tv_monitor")
DISTRACTORS = ("table", "sink", "refrigerator", "cabinet")
ROOM_LABELS = ("living room", "bedroom", "bathroom", "kitchen", "office", "dining room")
DEFAULT_NOISE = (0.05, 0.10, 0.05)
SUCCESS_RADIUS = 1.0
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ObjectSpec:
    width: float  # along the wall or x
    depth: float
    z_min: float
    z_max: float
    place: str  # wall | center | corner | free | wall_mounted | on_table


OBJECT_SPECS = {
    "sofa": ObjectSpec(1.8, 0.8, 0.0, 0.9, "wall"),
    "bed": ObjectSpec(2.0, 1.4, 0.0, 0.6, "wall"),
    "chair": ObjectSpec(0.5, 0.5, 0.0, 0.9, "free"),
    "plant": ObjectSpec(0.4, 0.4, 0.0, 1.1, "corner"),
    "toilet": ObjectSpec(0.4, 0.65, 0.0, 0.8, "wall"),
    "tv_monitor": ObjectSpec(1.0, 0.05, 1.0, 1.6, "wall_mounted"),
    "table": ObjectSpec(1.2, 0.8, 0.0, 0.75, "center"),
    "sink": ObjectSpec(0.6, 0.45, 0.0, 0.9, "wall"),
    "refrigerator": ObjectSpec(0.7, 0.7, 0.0, 1.8, "wall"),
    "cabinet": ObjectSpec(0.9, 0.45, 0.0, 1.0, "wall"),
}
TABLE_TV = ObjectSpec(0.6, 0.2, 0.75, 1.2, "on_table")

# room label -> [(category, probability, max count)]
PLACEMENT_TABLE = {
    "living room": [("sofa", 0.9, 1), ("tv_monitor", 0.7, 1), ("table", 0.6, 1),
                    ("chair", 0.5, 2), ("plant", 0.6, 1), ("cabinet", 0.3, 1)],
    "bedroom": [("bed", 1.0, 1), ("cabinet", 0.5, 1), ("tv_monitor", 0.3, 1),
                ("chair", 0.3, 1), ("plant", 0.4, 1)],
    "bathroom": [("toilet", 1.0, 1), ("sink", 0.9, 1), ("plant", 0.2, 1)],
    "kitchen": [("refrigerator", 0.9, 1), ("sink", 0.7, 1), ("table", 0.6, 1),
                ("chair", 0.7, 2), ("plant", 0.3, 1)],
    "office": [("table", 0.9, 1), ("chair", 0.9, 1), ("tv_monitor", 0.6, 1),
               ("plant", 0.5, 1), ("cabinet", 0.4, 1)],
    "dining room": [("table", 1.0, 1), ("chair", 1.0, 3), ("plant", 0.5, 1), ("cabinet", 0.3, 1)],
}


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int
    label: str

    def contains(self, cell: Cell) -> bool:
        return self.x <= cell[0] < self.x + self.w and self.y <= cell[1] < self.y + self.h


@dataclass(frozen=True)
class Instance:
    id: int
    category: str
    cells: tuple  # sorted (x, y) cells
    z_min: float
    z_max: float
    wall_mounted: bool = False


@dataclass(frozen=True)
class WorldParams:
    width_m: tuple[float, float] = (8.0, 11.0)
    height_m: tuple[float, float] = (6.0, 8.5)
    rooms: tuple[int, int] = (3, 5)
    min_room_m: float = 2.4
    resolution: float = 0.05
    wall_cells: int = 2
    door_m: float = 0.9
    goal_categories: tuple[str, ...] = GOAL_CATEGORIES
    distractors: tuple[str, ...] = DISTRACTORS
    min_start_distance: float = 2.0


class World:
    """Immutable world geometry, regions and object instances."""

    def __init__(self, wall: np.ndarray, regions: Sequence[Region], instances: Sequence[Instance],
                 start: Pose, goal: str, seed: int, resolution: float = 0.05) -> None:
        self.wall = np.asarray(wall, dtype=bool)
        self.wall.setflags(write=False)
        self.regions = tuple(regions)
        self.instances = tuple(instances)
        self.start = start
        self.goal = goal
        self.seed = int(seed)
        self.resolution = float(resolution)
        h, w = self.wall.shape
        blocked = self.wall.copy()
        inst_map = np.full((h, w), -1, dtype=np.int64)
        stacked: dict[int, list[int]] = {}
        for inst in self.instances:
            arr = np.asarray(inst.cells, dtype=np.int64).reshape(-1, 2)
            if not inst.wall_mounted:
                blocked[arr[:, 1], arr[:, 0]] = True
            for x, y in arr:
                flat = int(y) * w + int(x)
                stacked.setdefault(flat, []).append(inst.id)
                if inst_map[y, x] < 0:
                    inst_map[y, x] = inst.id
        self.blocked = blocked
        self.blocked.setflags(write=False)
        self.inst_map = inst_map
        self.cell_instances = {k: tuple(sorted(v)) for k, v in stacked.items()}
        region_map = np.full((h, w), -1, dtype=np.int64)
        for i, r in enumerate(self.regions):
            region_map[r.y:r.y + r.h, r.x:r.x + r.w] = np.where(
                region_map[r.y:r.y + r.h, r.x:r.x + r.w] < 0, i, region_map[r.y:r.y + r.h, r.x:r.x + r.w])
        self.region_map = region_map
        self._geo: dict[str, np.ndarray] = {}
        self.by_id = {inst.id: inst for inst in self.instances}

    @property
    def width(self) -> int:
        return self.wall.shape[1]

    @property
    def height(self) -> int:
        return self.wall.shape[0]

    @property
    def grid_config(self) -> GridConfig:
        return GridConfig(self.width, self.height, self.resolution)

    def world_to_cell(self, x: float, y: float) -> Cell:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def cell_to_world(self, cell: Cell) -> tuple[float, float]:
        return (cell[0] + 0.5) * self.resolution, (cell[1] + 0.5) * self.resolution

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.blocked[cell[1], cell[0]]

    def room_at(self, cell: Cell) -> Optional[str]:
        if not self.in_bounds(cell):
            return None
        i = self.region_map[cell[1], cell[0]]
        return self.regions[i].label if i >= 0 else None

    def instances_at(self, cell: Cell) -> tuple[int, ...]:
        return self.cell_instances.get(cell[1] * self.width + cell[0], ())

    def instances_of(self, category: str) -> list[Instance]:
        return [i for i in self.instances if i.category == category]

    # -- geodesics ------------------------------------------------------
    @cached_property
    def _free_graph(self):
        free = ~self.blocked
        h, w = free.shape
        index = np.full((h, w), -1, dtype=np.int64)
        ys, xs = np.nonzero(free)
        index[ys, xs] = np.arange(len(xs))
        rows, cols, vals = [], [], []
        for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
            y2, x2 = ys + dy, xs + dx
            ok = (y2 >= 0) & (y2 < h) & (x2 >= 0) & (x2 < w)
            ok[ok] &= free[y2[ok], x2[ok]]
            if dx and dy:
                # diagonal moves may not cut a blocked corner
                ok[ok] &= free[ys[ok], x2[ok]] & free[y2[ok], xs[ok]]
            rows.append(index[ys[ok], xs[ok]])
            cols.append(index[y2[ok], x2[ok]])
            vals.append(np.full(int(ok.sum()), SQRT2 if dx and dy else 1.0))
        n = len(xs)
        mat = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(n, n)).tocsr()
        return mat, index

    def success_mask(self, category: str, radius: float = SUCCESS_RADIUS) -> np.ndarray:
        """Free cells whose centre lies within ``radius`` of a cell of the category."""
        insts = self.instances_of(category)
        if not insts:
            raise KeyError(f"no instance of category {category!r}")
        target = np.zeros(self.wall.shape, dtype=bool)
        for inst in insts:
            arr = np.asarray(inst.cells).reshape(-1, 2)
            target[arr[:, 1], arr[:, 0]] = True
        dist = ndimage.distance_transform_edt(~target) * self.resolution
        return (dist <= radius + 1e-9) & ~self.blocked

    def goal_distance_field(self, category: str) -> np.ndarray:
        """Geodesic metres from each cell to the success boundary (inf if unreachable)."""
        hit = self._geo.get(category)
        if hit is not None:
            return hit
        mat, index = self._free_graph
        succ = self.success_mask(category)
        src = index[succ]
        out = np.full(self.wall.shape, np.inf)
        if len(src):
            d = cs_dijkstra(mat, directed=False, indices=src, min_only=True)
            free = index >= 0
            out[free] = d[index[free]] * self.resolution
        out.setflags(write=False)
        self._geo[category] = out
        return out

    def to_json(self) -> str:
        return dump_scenario(self)


def geodesic_to_goal(world: World, cell: Cell, category: str) -> float:
    """8-connected grid distance (metres) to the 1 m success boundary; inf if unreachable."""
    if not world.instances_of(category):
        raise KeyError(f"no instance of category {category!r}")
    if not world.in_bounds(cell):
        return math.inf
    return float(world.goal_distance_field(category)[cell[1], cell[0]])


# -- generation -------------------------------------------------------------

def _bsp(rng: np.random.Generator, w: int, h: int, n_rooms: int, min_side: int):
    leaves = [(0, 0, w, h)]
    while len(leaves) < n_rooms:
        order = sorted(range(len(leaves)), key=lambda i: (-(leaves[i][2] - leaves[i][0]) * (leaves[i][3] - leaves[i][1]), i))
        for i in order:
            x0, y0, x1, y1 = leaves[i]
            can_x = x1 - x0 >= 2 * min_side
            can_y = y1 - y0 >= 2 * min_side
            if not (can_x or can_y):
                continue
            if can_x and (not can_y or (x1 - x0) >= (y1 - y0)):
                s = int(rng.integers(x0 + min_side, x1 - min_side + 1))
                leaves[i:i + 1] = [(x0, y0, s, y1), (s, y0, x1, y1)]
            else:
                s = int(rng.integers(y0 + min_side, y1 - min_side + 1))
                leaves[i:i + 1] = [(x0, y0, x1, s), (x0, s, x1, y1)]
            break
        else:
            raise GenerationError(f"cannot fit {n_rooms} rooms of side >= {min_side} cells in {w}x{h}")
    return leaves


def _shared_walls(leaves, margin: int, door: int):
    pairs = []
    for i, a in enumerate(leaves):
        for j, b in enumerate(leaves):
            if j <= i:
                continue
            for p, q in ((a, b), (b, a)):
                if p[2] == q[0]:  # vertical shared boundary
                    lo, hi = max(p[1], q[1]), min(p[3], q[3])
                    if hi - lo >= door + 2 * margin:
                        pairs.append((i, j, "v", p[2], lo, hi))
                if p[3] == q[1]:
                    lo, hi = max(p[0], q[0]), min(p[2], q[2])
                    if hi - lo >= door + 2 * margin:
                        pairs.append((i, j, "h", p[3], lo, hi))
    return pairs


class _Placer:
    def __init__(self, rng, wall, res, wall_cells, doors_mask):
        self.rng = rng
        self.wall = wall
        self.res = res
        self.wc = wall_cells
        self.occ = np.zeros(wall.shape, dtype=bool)
        self.keepout = ndimage.binary_dilation(doors_mask, structure=np.ones((3, 3), bool),
                                               iterations=int(round(0.7 / res)))
        self.instances: list[Instance] = []

    def cells_m(self, m: float) -> int:
        return max(1, int(round(m / self.res)))

    def _free_rect(self, x0, y0, w, h, gap) -> bool:
        H, W = self.wall.shape
        if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
            return False
        if self.wall[y0:y0 + h, x0:x0 + w].any() or self.keepout[y0:y0 + h, x0:x0 + w].any():
            return False
        gx0, gy0 = max(0, x0 - gap), max(0, y0 - gap)
        return not self.occ[gy0:y0 + h + gap, gx0:x0 + w + gap].any()

    def _connected_ok(self, x0, y0, w, h) -> bool:
        trial = self.wall | self.occ
        trial = trial.copy()
        trial[y0:y0 + h, x0:x0 + w] = True
        grown = ndimage.binary_dilation(trial, structure=np.ones((3, 3), bool), iterations=4)
        free = ~grown
        labels, n = ndimage.label(free, structure=np.ones((3, 3), bool))
        return n == self._base_components

    def set_baseline(self) -> None:
        grown = ndimage.binary_dilation(self.wall, structure=np.ones((3, 3), bool), iterations=4)
        _, self._base_components = ndimage.label(~grown, structure=np.ones((3, 3), bool))

    def add(self, cat, spec, cells, wall_mounted=False) -> Instance:
        inst = Instance(len(self.instances), cat, tuple(sorted(cells)), spec.z_min, spec.z_max, wall_mounted)
        self.instances.append(inst)
        if not wall_mounted:
            arr = np.asarray(cells)
            self.occ[arr[:, 1], arr[:, 0]] = True
        return inst

    def place(self, cat: str, room, tries: int = 40) -> Optional[Instance]:
        x0, y0, x1, y1 = room
        ix0, iy0, ix1, iy1 = x0 + self.wc, y0 + self.wc, x1 - self.wc, y1 - self.wc
        spec = OBJECT_SPECS[cat]
        if spec.place == "wall_mounted":
            return self._place_wall_mounted(cat, spec, room)
        a, b = self.cells_m(spec.width), self.cells_m(spec.depth)
        gap = self.cells_m(0.3)
        for _ in range(tries):
            if spec.place in ("wall", "corner"):
                side = int(self.rng.integers(4))
                w, h = (a, b) if side in (0, 1) else (b, a)
                if spec.place == "corner":
                    xs = [ix0, ix1 - w]
                    ys = [iy0, iy1 - h]
                    x, y = xs[int(self.rng.integers(2))], ys[int(self.rng.integers(2))]
                elif side == 0:
                    x, y = int(self.rng.integers(ix0, max(ix0 + 1, ix1 - w + 1))), iy0
                elif side == 1:
                    x, y = int(self.rng.integers(ix0, max(ix0 + 1, ix1 - w + 1))), iy1 - h
                elif side == 2:
                    x, y = ix0, int(self.rng.integers(iy0, max(iy0 + 1, iy1 - h + 1)))
                else:
                    x, y = ix1 - w, int(self.rng.integers(iy0, max(iy0 + 1, iy1 - h + 1)))
            else:
                w, h = (a, b) if self.rng.random() < 0.5 else (b, a)
                margin = self.cells_m(0.7) if spec.place == "center" else self.cells_m(0.4)
                lo_x, hi_x = ix0 + margin, ix1 - margin - w
                lo_y, hi_y = iy0 + margin, iy1 - margin - h
                if hi_x < lo_x or hi_y < lo_y:
                    continue
                x = int(self.rng.integers(lo_x, hi_x + 1))
                y = int(self.rng.integers(lo_y, hi_y + 1))
            if not self._free_rect(x, y, w, h, gap):
                continue
            if not self._connected_ok(x, y, w, h):
                continue
            cells = [(cx, cy) for cy in range(y, y + h) for cx in range(x, x + w)]
            return self.add(cat, spec, cells)
        return None

    def _place_wall_mounted(self, cat, spec, room) -> Optional[Instance]:
        x0, y0, x1, y1 = room
        n = self.cells_m(spec.width)
        H, W = self.wall.shape
        for _ in range(40):
            side = int(self.rng.integers(4))
            if side in (0, 1):
                row = y0 + self.wc - 1 if side == 0 else y1 - self.wc
                inner = row + 1 if side == 0 else row - 1
                x = int(self.rng.integers(x0 + self.wc, max(x0 + self.wc + 1, x1 - self.wc - n + 1)))
                cells = [(cx, row) for cx in range(x, x + n)]
                front = [(cx, inner) for cx in range(x, x + n)]
            else:
                col = x0 + self.wc - 1 if side == 2 else x1 - self.wc
                inner = col + 1 if side == 2 else col - 1
                y = int(self.rng.integers(y0 + self.wc, max(y0 + self.wc + 1, y1 - self.wc - n + 1)))
                cells = [(col, cy) for cy in range(y, y + n)]
                front = [(inner, cy) for cy in range(y, y + n)]
            if not all(0 <= cx < W and 0 <= cy < H and self.wall[cy, cx] for cx, cy in cells):
                continue
            if any(self.wall[cy, cx] or self.occ[cy, cx] for cx, cy in front):
                continue
            if any(inst.wall_mounted and set(inst.cells) & set(cells) for inst in self.instances):
                continue
            return self.add(cat, spec, cells, wall_mounted=True)
        return None

    def place_on(self, support: Instance, cat: str, spec: ObjectSpec) -> Optional[Instance]:
        xs = [c[0] for c in support.cells]
        ys = [c[1] for c in support.cells]
        a, b = self.cells_m(spec.width), self.cells_m(spec.depth)
        w, h = (a, b) if max(xs) - min(xs) >= max(ys) - min(ys) else (b, a)
        cx = (min(xs) + max(xs) + 1 - w) // 2
        cy = (min(ys) + max(ys) + 1 - h) // 2
        cells = [(x, y) for y in range(cy, cy + h) for x in range(cx, cx + w)]
        if not set(cells) <= set(support.cells):
            return None
        inst = Instance(len(self.instances), cat, tuple(sorted(cells)), spec.z_min, spec.z_max, False)
        self.instances.append(inst)
        return inst


def generate_world(seed: int, params: WorldParams = WorldParams(), goal: Optional[str] = None) -> World:
    """Deterministic BSP house with furnished rooms, a start pose and a goal category."""
    last: Optional[Exception] = None
    for attempt in range(25):
        rng = np.random.default_rng([int(seed), attempt])
        try:
            return _generate(rng, int(seed), params, goal)
        except _Retry as exc:
            last = exc
    raise GenerationError(f"seed {seed}: could not build a valid world ({last})")


class _Retry(Exception):
    pass


def _generate(rng: np.random.Generator, seed: int, params: WorldParams, goal: Optional[str]) -> World:
    res = params.resolution
    W = int(round(rng.uniform(*params.width_m) / res))
    H = int(round(rng.uniform(*params.height_m) / res))
    lo, hi = params.rooms
    if lo < 1 or hi < lo:
        raise GenerationError(f"invalid room count range {params.rooms}")
    n_rooms = int(rng.integers(lo, hi + 1))
    min_side = int(round(params.min_room_m / res))
    leaves = _bsp(rng, W, H, n_rooms, min_side)
    wc = params.wall_cells
    wall = np.zeros((H, W), dtype=bool)
    wall[:wc, :] = wall[-wc:, :] = True
    wall[:, :wc] = wall[:, -wc:] = True
    for (x0, y0, x1, y1) in leaves:
        if x0 > 0:
            wall[y0:y1, x0:x0 + wc // 2 + wc % 2] = True
        if x1 < W:
            wall[y0:y1, x1 - wc // 2:x1] = True
        if y0 > 0:
            wall[y0:y0 + wc // 2 + wc % 2, x0:x1] = True
        if y1 < H:
            wall[y1 - wc // 2:y1, x0:x1] = True
    door = int(round(params.door_m / res))
    margin = wc + int(round(0.3 / res))
    pairs = _shared_walls(leaves, margin, door)
    parent = list(range(len(leaves)))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    doors_mask = np.zeros_like(wall)
    order = rng.permutation(len(pairs)) if pairs else []
    carved = 0
    for k in order:
        i, j, kind, pos, a, b = pairs[int(k)]
        joined = find(i) != find(j)
        if not joined and rng.random() > 0.25:
            continue
        parent[find(i)] = find(j)
        start = int(rng.integers(a + margin, b - margin - door + 1))
        half = wc // 2 + wc % 2
        if kind == "v":
            sl = (slice(start, start + door), slice(pos - wc // 2, pos + half))
        else:
            sl = (slice(pos - wc // 2, pos + half), slice(start, start + door))
        wall[sl] = False
        doors_mask[sl] = True
        carved += 1
    if len({find(i) for i in range(len(leaves))}) != 1:
        raise _Retry("rooms not connected")

    labels = list(rng.permutation(ROOM_LABELS))
    while len(labels) < len(leaves):
        labels.append(ROOM_LABELS[int(rng.integers(len(ROOM_LABELS)))])
    regions = [Region(x0, y0, x1 - x0, y1 - y0, str(labels[i])) for i, (x0, y0, x1, y1) in enumerate(leaves)]

    placer = _Placer(rng, wall, res, wc, doors_mask)
    placer.set_baseline()
    allowed = set(params.goal_categories) | set(params.distractors)
    for room, region in zip(leaves, regions):
        for cat, prob, count in PLACEMENT_TABLE.get(region.label, []):
            if cat not in allowed:
                continue
            for _ in range(count):
                if rng.random() >= prob:
                    continue
                inst = placer.place(cat, room)
                if (inst is not None and cat == "table" and region.label == "office"
                        and "tv_monitor" in allowed and rng.random() < 0.6):
                    placer.place_on(inst, "tv_monitor", TABLE_TV)
    instances = placer.instances
    present = sorted({i.category for i in instances} & set(params.goal_categories))
    if goal is not None:
        if goal not in present:
            raise _Retry(f"goal {goal} not placed")
        goal_cat = goal
    else:
        if not present:
            raise _Retry("no goal category placed")
        goal_cat = present[int(rng.integers(len(present)))]
    world = World(wall, regions, instances, Pose(0.0, 0.0, 0.0), goal_cat, seed, res)
    field_ = world.goal_distance_field(goal_cat)
    clearance = ndimage.distance_transform_edt(~world.blocked) * res
    ok = (clearance >= 0.3) & np.isfinite(field_) & (field_ >= params.min_start_distance)
    ys, xs = np.nonzero(ok)
    if len(xs) == 0:
        raise _Retry("no valid start cell")
    j = int(rng.integers(len(xs)))
    sx, sy = int(xs[j]), int(ys[j])
    theta = float(30 * int(rng.integers(12)))
    start = Pose((sx + 0.5) * res, (sy + 0.5) * res, theta)
    return World(wall, regions, instances, start, goal_cat, seed, res)


# -- perception ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    misclassify_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "false_positive_rate", "misclassify_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def default(cls, seed: int = 0) -> "NoiseModel":
        return cls(*DEFAULT_NOISE, seed=seed)


@dataclass(frozen=True)
class Observation:
    depth_scan: DepthScan
    detections: tuple
    room_hint: Optional[str]


@dataclass
class Phantom:
    cells: frozenset
    centre: Cell
    bearings: list  # observer bearings so far
    category: str
    z_interval: tuple[float, float]
    resolved: bool = False


def _angle_diff(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


class Perception:
    """Ray-cast depth plus noisy instance detections for one episode.

    Holds the noise stream and the phantom detections spawned so far.
    """

    def __init__(self, world: World, noise: NoiseModel = NoiseModel(), fov_deg: float = 90.0,
                 n_rays: int = 64, min_range: float = SENSOR_MIN_RANGE,
                 max_range: float = SENSOR_MAX_RANGE) -> None:
        self.world = world
        self.noise = noise
        self.fov_deg = fov_deg
        self.angles = scan_angles(fov_deg, n_rays)
        self.min_range = min_range
        self.max_range = max_range
        self.rng = np.random.default_rng([int(noise.seed), 7919])
        self.oracle_rng = np.random.default_rng([int(noise.seed), 104729])
        self.phantoms: list[Phantom] = []
        vocab = set(GOAL_CATEGORIES) | set(DISTRACTORS) | {i.category for i in world.instances}
        self.vocabulary = tuple(sorted(vocab))

    def raycast(self, pose: Pose):
        """Range per ray (metres) and the first blocked cell of each ray (or None)."""
        w = self.world
        cell = w.world_to_cell(pose.x, pose.y)
        res = w.resolution
        table = ray_table(math.radians(pose.theta % 360.0) + self.angles, self.max_range / res + 2.0)
        xs = cell[0] + table.dx
        ys = cell[1] + table.dy
        inb = (xs >= 0) & (xs < w.width) & (ys >= 0) & (ys < w.height)
        blocked = np.ones(xs.shape, dtype=bool)
        blocked[inb] = w.blocked[ys[inb], xs[inb]]
        blocked &= table.valid
        blocked[:, 0] = False
        first = np.argmax(blocked, axis=1)
        has = blocked.any(axis=1)
        rows = np.arange(len(first))
        t_mid = np.where(has, 0.5 * (table.t_in[rows, first] + table.t_out[rows, first]), np.inf)
        ranges = np.clip(t_mid * res, self.min_range, self.max_range)
        hits = []
        for i in range(len(first)):
            if has[i] and table.t_in[i, first[i]] * res <= self.max_range:
                hits.append((int(xs[i, first[i]]), int(ys[i, first[i]])))
            else:
                hits.append(None)
        return ranges, hits

    def _visible(self, pose: Pose, cell: Cell) -> Optional[float]:
        """Bearing (object to agent) if ``cell`` is in view and unoccluded, else None."""
        w = self.world
        px, py = w.cell_to_world(cell)
        dx, dy = px - pose.x, py - pose.y
        dist = math.hypot(dx, dy)
        if dist > self.max_range or dist < 1e-9:
            return None
        if _angle_diff(math.degrees(math.atan2(dy, dx)), pose.theta) > self.fov_deg / 2.0:
            return None
        r = w.resolution
        cells = segment_cells(pose.x / r, pose.y / r, px / r, py / r)
        for cx, cy in cells[:-1]:
            if not w.in_bounds((cx, cy)) or w.blocked[cy, cx]:
                return None
        return math.degrees(math.atan2(-dy, -dx))

    def observe(self, pose: Pose, step: int) -> Observation:
        w = self.world
        cell = w.world_to_cell(pose.x, pose.y)
        if not w.is_free(cell):
            raise InvalidPoseError(f"pose cell {cell} is not free")
        ranges, hits = self.raycast(pose)
        seen: dict[int, set] = {}
        for hc in hits:
            if hc is None:
                continue
            for iid in w.instances_at(hc):
                seen.setdefault(iid, set()).add(hc)
        dets: list[Detection] = []
        nz = self.noise
        for iid in sorted(seen):
            inst = w.by_id[iid]
            if self.rng.random() < nz.miss_rate:
                continue
            cat = inst.category
            if self.rng.random() < nz.misclassify_rate:
                others = [c for c in self.vocabulary if c != cat]
                cat = others[int(self.rng.integers(len(others)))]
            conf = float(self.rng.uniform(0.6, 1.0))
            dets.append(Detection(cat, frozenset(seen[iid]), (inst.z_min, inst.z_max), conf,
                                  pose, step, inst.wall_mounted))
        resolved_now = False
        for ph in self.phantoms:
            if ph.resolved:
                continue
            bearing = self._visible(pose, ph.centre)
            if bearing is None:
                continue
            if any(_angle_diff(bearing, b) >= 45.0 for b in ph.bearings):
                ph.resolved = True
                resolved_now = True
                continue
            ph.bearings.append(bearing)
            dets.append(Detection(ph.category, ph.cells, ph.z_interval,
                                  float(self.rng.uniform(0.6, 1.0)), pose, step))
        active = any(not p.resolved for p in self.phantoms)
        if not active and not resolved_now and nz.false_positive_rate > 0:
            if self.rng.random() < nz.false_positive_rate:
                ph = self._spawn(pose, ranges)
                if ph is not None:
                    self.phantoms.append(ph)
                    dets.append(Detection(ph.category, ph.cells, ph.z_interval,
                                          float(self.rng.uniform(0.6, 1.0)), pose, step))
        scan = DepthScan(self.angles.copy(), ranges, self.min_range, self.max_range)
        return Observation(scan, tuple(dets), w.room_at(cell))

    def _spawn(self, pose: Pose, ranges: np.ndarray) -> Optional[Phantom]:
        w = self.world
        goal_mask = w.success_mask(w.goal, SUCCESS_RADIUS + 0.5) if w.instances_of(w.goal) else None
        order = self.rng.permutation(len(ranges))
        for i in order[:8]:
            far = min(float(ranges[i]) - 0.3, 4.0)
            if far < 1.0:
                continue
            d = float(self.rng.uniform(1.0, far))
            a = math.radians(pose.theta) + float(self.angles[i])
            c = w.world_to_cell(pose.x + d * math.cos(a), pose.y + d * math.sin(a))
            if not w.is_free(c) or (goal_mask is not None and goal_mask[c[1], c[0]]):
                continue
            cells = frozenset((c[0] + dx, c[1] + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                              if w.is_free((c[0] + dx, c[1] + dy)))
            bearing = self._visible(pose, c)
            if bearing is None:
                continue
            return Phantom(cells, c, [bearing], w.goal, (0.3, 0.8))
        return None

    # -- correction oracle ------------------------------------------------
    def correction_oracle(self, scene: SceneGraph, p: float = 1.0) -> list[Correction]:
        """Ground-truth-backed corrections, each emitted with probability ``p``."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("reliability must lie in [0, 1]")
        return correction_oracle(self.world, scene, p, self.oracle_rng, self.phantoms)


def observe(world: World, pose: Pose, noise: NoiseModel, step: int) -> Observation:
    """One-shot observation with a fresh noise stream (no phantom memory)."""
    return Perception(world, noise).observe(pose, step)


def _match(world: World, cells, phantoms: Sequence[Phantom]):
    votes: Counter = Counter()
    for c in cells:
        for iid in world.instances_at(c):
            votes[iid] += 1
    if votes:
        best = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        return "instance", best
    for k, ph in enumerate(phantoms):
        if ph.cells & set(cells):
            return "phantom", k
    return "none", None


def correction_oracle(world: World, scene: SceneGraph, p: float = 1.0,
                      rng: Optional[np.random.Generator] = None,
                      phantoms: Sequence[Phantom] = ()) -> list[Correction]:
    """Compare scene nodes with ground truth by footprint overlap."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def keep() -> bool:
        return p >= 1.0 or rng.random() < p

    relabels, merges, deletes, rooms = [], [], [], []
    groups: dict[int, list[int]] = {}
    for nid in sorted(scene.nodes):
        node = scene.nodes[nid]
        kind, ref = _match(world, node.footprint, phantoms)
        if kind == "instance":
            truth = world.by_id[ref]
            if node.category != truth.category:
                relabels.append(Correction.relabel(nid, truth.category))
            groups.setdefault(ref, []).append(nid)
        elif kind == "phantom":
            if phantoms[ref].resolved:
                deletes.append(Correction.delete(nid))
        else:
            deletes.append(Correction.delete(nid))
    for ref in sorted(groups):
        ids = groups[ref]
        for other in ids[1:]:
            merges.append(Correction.merge(ids[0], other))
    merged_away = {c.b for c in merges}
    for nid in sorted(scene.nodes):
        if nid in merged_away or any(d.a == nid for d in deletes):
            continue
        votes: Counter = Counter()
        for c in scene.nodes[nid].footprint:
            lab = world.room_at(c)
            if lab:
                votes[lab] += 1
        if votes:
            room = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            if scene.nodes[nid].room_type != room:
                rooms.append(Correction.set_room(nid, room))
    out = []
    for c in relabels + merges + deletes + rooms:
        if keep():
            out.append(c)
    return out


# -- scenario files -------------------------------------------------------------

class ScenarioError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class _LDict(dict):
    line = 0


class _LList(list):
    line = 0
    lines: list


def _line_decoder(text: str) -> json.JSONDecoder:
    starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def line_of(pos: int) -> int:
        return bisect.bisect_right(starts, pos)

    dec = json.JSONDecoder()

    def parse_object(s_and_end, *args):
        value, end = JSONObject(s_and_end, *args)
        out = _LDict(value)
        out.line = line_of(s_and_end[1])
        return out, end

    def parse_array(s_and_end, scan_once, _w=WHITESPACE.match, _ws=WHITESPACE_STR):
        s, end = s_and_end
        out = _LList()
        out.line = line_of(end)
        out.lines = []
        nextchar = s[end:end + 1]
        if nextchar in _ws:
            end = _w(s, end + 1).end()
            nextchar = s[end:end + 1]
        if nextchar == "]":
            return out, end + 1
        while True:
            out.lines.append(line_of(end))
            value, end = scan_once(s, end)
            out.append(value)
            nextchar = s[end:end + 1]
            if nextchar in _ws:
                end = _w(s, end + 1).end()
                nextchar = s[end:end + 1]
            end += 1
            if nextchar == "]":
                break
            if nextchar != ",":
                raise JSONDecodeError("Expecting ',' delimiter", s, end - 1)
            if s[end:end + 1] in _ws:
                end = _w(s, end + 1).end()
        return out, end

    dec.parse_object = parse_object
    dec.parse_array = parse_array
    dec.memo = {}
    dec.scan_once = py_make_scanner(dec)
    return dec


def _key_line(text: str, key: str) -> Optional[int]:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_scenario(text: str) -> World:
    """Parse and validate a scenario document; errors carry the offending line."""
    try:
        doc = _line_decoder(text).decode(text)
    except JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object", 1)
    for key in ("grid", "regions", "instances", "start", "goal", "seed"):
        if key not in doc:
            raise ScenarioError(f"missing key {key!r}", getattr(doc, "line", 1))
    res = doc.get("resolution", 0.05)
    if not isinstance(res, (int, float)) or res <= 0:
        raise ScenarioError("resolution must be a positive number", _key_line(text, "resolution"))
    grid = doc["grid"]
    if not isinstance(grid, list) or not grid:
        raise ScenarioError("grid must be a non-empty list of row strings", _key_line(text, "grid"))
    width = None
    for r, row in enumerate(grid):
        ln = grid.lines[r] if isinstance(grid, _LList) else None
        if not isinstance(row, str):
            raise ScenarioError(f"grid row {r} is not a string", ln)
        if width is None:
            width = len(row)
        if len(row) != width or width == 0:
            raise ScenarioError(f"grid row {r} has length {len(row)}, expected {width}", ln)
        bad = set(row) - {"#", "."}
        if bad:
            raise ScenarioError(f"grid row {r} has invalid characters {sorted(bad)}", ln)
    wall = np.array([[ch == "#" for ch in row] for row in grid], dtype=bool)
    H, W = wall.shape

    regions = []
    rl = doc["regions"]
    if not isinstance(rl, list):
        raise ScenarioError("regions must be a list", _key_line(text, "regions"))
    cover = np.zeros((H, W), dtype=np.int64)
    for k, reg in enumerate(rl):
        ln = rl.lines[k] if isinstance(rl, _LList) else None
        if not isinstance(reg, dict) or set(reg) != {"x", "y", "w", "h", "label"}:
            raise ScenarioError(f"region {k} must have keys x, y, w, h, label", ln)
        x, y, w, h = (reg[c] for c in ("x", "y", "w", "h"))
        if not all(isinstance(v, int) for v in (x, y, w, h)) or w <= 0 or h <= 0:
            raise ScenarioError(f"region {k} needs positive integer extents", ln)
        if x < 0 or y < 0 or x + w > W or y + h > H:
            raise ScenarioError(f"region {k} lies outside the grid", ln)
        if not isinstance(reg["label"], str) or not reg["label"]:
            raise ScenarioError(f"region {k} needs a label", ln)
        cover[y:y + h, x:x + w] += 1
        regions.append(Region(x, y, w, h, reg["label"]))
    free = ~wall
    if np.any(free & (cover == 0)):
        ys, xs = np.nonzero(free & (cover == 0))
        raise ScenarioError(f"free cell ({xs[0]}, {ys[0]}) is not covered by any region",
                            _key_line(text, "regions"))
    if np.any(free & (cover > 1)):
        ys, xs = np.nonzero(free & (cover > 1))
        raise ScenarioError(f"free cell ({xs[0]}, {ys[0]}) is covered by more than one region",
                            _key_line(text, "regions"))

    instances = []
    il = doc["instances"]
    if not isinstance(il, list):
        raise ScenarioError("instances must be a list", _key_line(text, "instances"))
    seen_ids = set()
    for k, it in enumerate(il):
        ln = il.lines[k] if isinstance(il, _LList) else None
        need = {"id", "category", "cells", "z_min", "z_max", "wall_mounted"}
        if not isinstance(it, dict) or set(it) != need:
            raise ScenarioError(f"instance {k} must have keys {sorted(need)}", ln)
        iid = it["id"]
        if not isinstance(iid, int) or iid in seen_ids:
            raise ScenarioError(f"instance {k} has a missing or duplicate id", ln)
        seen_ids.add(iid)
        if not isinstance(it["category"], str) or not it["category"]:
            raise ScenarioError(f"instance {iid} needs a category", ln)
        if not isinstance(it["wall_mounted"], bool):
            raise ScenarioError(f"instance {iid}: wall_mounted must be a boolean", ln)
        zmin, zmax = it["z_min"], it["z_max"]
        if not all(isinstance(v, (int, float)) for v in (zmin, zmax)) or zmin > zmax:
            raise ScenarioError(f"instance {iid}: need numeric z_min <= z_max", ln)
        cells = it["cells"]
        if not isinstance(cells, list) or not cells:
            raise ScenarioError(f"instance {iid}: cells must be a non-empty list", ln)
        parsed = []
        for c in cells:
            if not (isinstance(c, list) and len(c) == 2 and all(isinstance(v, int) for v in c)):
                raise ScenarioError(f"instance {iid}: each cell must be [x, y]", ln)
            x, y = c
            if not (0 <= x < W and 0 <= y < H):
                raise ScenarioError(f"instance {iid}: cell ({x}, {y}) lies outside the grid", ln)
            if it["wall_mounted"] and not wall[y, x]:
                raise ScenarioError(f"instance {iid}: wall-mounted cell ({x}, {y}) is not a wall", ln)
            if not it["wall_mounted"] and wall[y, x]:
                raise ScenarioError(f"instance {iid}: cell ({x}, {y}) lies on a wall", ln)
            parsed.append((x, y))
        instances.append(Instance(iid, it["category"], tuple(sorted(set(parsed))),
                                  float(zmin), float(zmax), it["wall_mounted"]))

    st = doc["start"]
    sl = getattr(st, "line", _key_line(text, "start"))
    if not isinstance(st, dict) or set(st) != {"x", "y", "theta_deg"}:
        raise ScenarioError("start must have keys x, y, theta_deg", sl)
    if not all(isinstance(st[k], (int, float)) for k in ("x", "y", "theta_deg")):
        raise ScenarioError("start values must be numbers", sl)
    sx, sy = int(st["x"]), int(st["y"])
    if not (0 <= sx < W and 0 <= sy < H) or wall[sy, sx]:
        raise ScenarioError(f"start cell ({sx}, {sy}) is not a free cell", sl)
    goal = doc["goal"]
    if not isinstance(goal, str) or not goal:
        raise ScenarioError("goal must be a category name", _key_line(text, "goal"))
    seed = doc["seed"]
    if not isinstance(seed, int):
        raise ScenarioError("seed must be an integer", _key_line(text, "seed"))
    start = Pose((sx + 0.5) * res, (sy + 0.5) * res, float(st["theta_deg"]))
    world = World(wall, regions, instances, start, goal, seed, float(res))
    if world.blocked[sy, sx]:
        raise ScenarioError(f"start cell ({sx}, {sy}) is occupied by an instance", sl)
    return world


def dump_scenario(world: World) -> str:
    """Canonical scenario text: one region, instance or grid row per line."""
    sx, sy = world.world_to_cell(world.start.x, world.start.y)
    lines = ["{"]
    lines.append(f'  "seed": {world.seed},')
    lines.append(f'  "goal": {json.dumps(world.goal)},')
    lines.append(f'  "resolution": {json.dumps(world.resolution)},')
    lines.append(f'  "start": {{"x": {sx}, "y": {sy}, "theta_deg": {json.dumps(float(world.start.theta))}}},')
    lines.append('  "regions": [')
    regs = [json.dumps({"x": r.x, "y": r.y, "w": r.w, "h": r.h, "label": r.label}) for r in world.regions]
    lines.extend("    " + r + ("," if i < len(regs) - 1 else "") for i, r in enumerate(regs))
    lines.append("  ],")
    lines.append('  "instances": [')
    its = [json.dumps({"id": i.id, "category": i.category, "cells": [list(c) for c in i.cells],
                       "z_min": i.z_min, "z_max": i.z_max, "wall_mounted": i.wall_mounted},
                      separators=(",", ":")) for i in world.instances]
    lines.extend("    " + s + ("," if k < len(its) - 1 else "") for k, s in enumerate(its))
    lines.append("  ],")
    lines.append('  "grid": [')
    rows = ["".join("#" if v else "." for v in row) for row in world.wall]
    lines.extend(f'    "{r}"' + ("," if k < len(rows) - 1 else "") for k, r in enumerate(rows))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"
