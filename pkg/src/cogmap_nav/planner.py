"""Fast Marching distance fields and greedy discrete action selection."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numba
import numpy as np
from scipy import ndimage

from .errors import PlannerError
from .occupancy import Cell, GridConfig, OccupancyGrid, Pose
from .rays import segment_cells

INIT_RADIUS = 5  # cells around the goal seeded with exact Euclidean distance


class Action(str, Enum):
    MOVE_FORWARD = "move_forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LOOK_UP = "look_up"
    LOOK_DOWN = "look_down"
    STOP = "stop"


@dataclass(frozen=True)
class ActionParams:
    forward_step: float = 0.25
    turn_angle: float = 30.0
    align_tolerance: float = 15.0


@dataclass(frozen=True)
class ReplanRequest:
    reason: str


@dataclass
class DistanceField:
    values: np.ndarray  # metres, inf where unreachable or non-traversable
    goal: Cell
    config: GridConfig

    def at(self, cell: Cell) -> float:
        x, y = cell
        if 0 <= x < self.config.width and 0 <= y < self.config.height:
            return float(self.values[y, x])
        return math.inf

    def cell_of(self, x: float, y: float) -> Cell:
        ox, oy = self.config.origin
        r = self.config.resolution
        return int(math.floor((x - ox) / r)), int(math.floor((y - oy) / r))

    def at_world(self, x: float, y: float) -> float:
        return self.at(self.cell_of(x, y))


@numba.njit(cache=True)
def _tri(ta, td, h):
    # axis neighbour ta at distance h, diagonal neighbour td at h*sqrt(2)
    k = (ta - td) / h
    if k <= 0.0:
        return ta + h
    if k >= 1.0 / math.sqrt(2.0):
        return td + h * math.sqrt(2.0)
    s = k / math.sqrt(1.0 - k * k)
    return ta - s * (ta - td) + h * math.sqrt(1.0 + s * s)


@numba.njit(cache=True)
def _fmm(passable, gy, gx, h, init_r, stop_y, stop_x, margin):
    H, W = passable.shape
    INF = np.inf
    T = np.full((H, W), INF)
    state = np.zeros((H, W), np.uint8)  # 0 far, 1 trial, 2 accepted
    heap = [(0.0, 0)]
    heap.pop()
    r = init_r
    for y in range(max(0, gy - r), min(H, gy + r + 1)):
        for x in range(max(0, gx - r), min(W, gx + r + 1)):
            if not passable[y, x]:
                continue
            d2 = (y - gy) ** 2 + (x - gx) ** 2
            if d2 > r * r:
                continue
            ok = True
            n = 4 * (abs(y - gy) + abs(x - gx)) + 1
            py, px = gy, gx
            for i in range(n + 1):
                t = i / n
                yy = int(round(gy + (y - gy) * t))
                xx = int(round(gx + (x - gx) * t))
                # a diagonal step must not squeeze between two blocked corners
                if not passable[yy, xx] or not (passable[py, xx] and passable[yy, px]):
                    ok = False
                    break
                py, px = yy, xx
            if ok:
                T[y, x] = math.sqrt(d2) * h
                heapq.heappush(heap, (T[y, x], y * W + x))
                state[y, x] = 1
    dy = np.array([-1, 1, 0, 0, -1, -1, 1, 1])
    dx = np.array([0, 0, -1, 1, -1, 1, -1, 1])
    limit = INF
    while len(heap) > 0:
        v, idx = heapq.heappop(heap)
        y = idx // W
        x = idx % W
        if state[y, x] == 2 or v > T[y, x]:
            continue
        if v > limit:
            break
        state[y, x] = 2
        if y == stop_y and x == stop_x:
            limit = v + margin
        for k in range(8):
            ny = y + dy[k]
            nx = x + dx[k]
            if ny < 0 or ny >= H or nx < 0 or nx >= W or not passable[ny, nx] or state[ny, nx] == 2:
                continue
            best = T[ny, nx]
            a = INF
            for sx in (-1, 1):
                xx = nx + sx
                if 0 <= xx < W and state[ny, xx] == 2 and T[ny, xx] < a:
                    a = T[ny, xx]
            b = INF
            for sy in (-1, 1):
                yy = ny + sy
                if 0 <= yy < H and state[yy, nx] == 2 and T[yy, nx] < b:
                    b = T[yy, nx]
            if a < INF and b < INF and abs(a - b) < h:
                c = 0.5 * (a + b + math.sqrt(2 * h * h - (a - b) ** 2))
            else:
                c = min(a, b) + h
            if c < best:
                best = c
            for sy in (-1, 1):
                for sx in (-1, 1):
                    yy = ny + sy
                    xx = nx + sx
                    if yy < 0 or yy >= H or xx < 0 or xx >= W:
                        continue
                    # no corner cutting
                    if not (passable[ny, xx] and passable[yy, nx]):
                        continue
                    if state[yy, xx] != 2:
                        continue
                    td = T[yy, xx]
                    c = td + h * math.sqrt(2.0)
                    if state[ny, xx] == 2:
                        c = min(c, _tri(T[ny, xx], td, h))
                    if state[yy, nx] == 2:
                        c = min(c, _tri(T[yy, nx], td, h))
                    if c < best:
                        best = c
            if best < T[ny, nx]:
                T[ny, nx] = best
                state[ny, nx] = 1
                heapq.heappush(heap, (best, ny * W + nx))
    for y in range(H):
        for x in range(W):
            if state[y, x] != 2:
                T[y, x] = INF
    return T


def fmm_solve(passable: np.ndarray, goal: Cell, resolution: float,
              stop_at: Optional[Cell] = None, margin: float = math.inf,
              init_radius: int = INIT_RADIUS) -> np.ndarray:
    """Eikonal travel distance (metres) from ``goal`` over a boolean passability mask.

    With ``stop_at`` the front stops once it has passed that cell by ``margin``
    metres; cells not reached are left at infinity.
    """
    gx, gy = goal
    if not passable[gy, gx]:
        raise PlannerError(f"goal cell {goal} is not traversable")
    sx, sy = stop_at if stop_at is not None else (-1, -1)
    return _fmm(np.ascontiguousarray(passable, dtype=np.bool_), int(gy), int(gx), float(resolution),
                int(init_radius), int(sy), int(sx), float(margin))


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def planning_mask(grid: OccupancyGrid, inflation: int = 2, keep: Optional[Cell] = None) -> np.ndarray:
    """Traversable cells after inflating obstacles; inflation is lifted around ``keep``."""
    trav = grid.traversable()
    if inflation <= 0:
        return trav
    blocked = ndimage.binary_dilation(grid.obstacle, structure=_disk(inflation))
    mask = trav & ~blocked
    if keep is not None:
        kx, ky = keep
        r = inflation + 1
        y0, y1 = max(0, ky - r), min(grid.shape[0], ky + r + 1)
        x0, x1 = max(0, kx - r), min(grid.shape[1], kx + r + 1)
        mask[y0:y1, x0:x1] |= trav[y0:y1, x0:x1]
    return mask


def nearest_passable(mask: np.ndarray, cell: Cell) -> Optional[Cell]:
    """Closest cell of ``mask`` to ``cell`` (Euclidean, ties row-major)."""
    x, y = cell
    if 0 <= x < mask.shape[1] and 0 <= y < mask.shape[0] and mask[y, x]:
        return cell
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    j = int(np.argmin(d2))
    return int(xs[j]), int(ys[j])


def fmm_distance_field(grid: OccupancyGrid, goal: Cell, inflation: int = 2,
                       agent: Optional[Cell] = None, margin: Optional[float] = None) -> DistanceField:
    """Distance-to-goal field on the inflated traversable area of ``grid``."""
    mask = planning_mask(grid, inflation, keep=agent)
    gx, gy = goal
    if not (0 <= gx < grid.config.width and 0 <= gy < grid.config.height) or not mask[gy, gx]:
        raise PlannerError(f"goal cell {goal} is not traversable")
    values = fmm_solve(mask, goal, grid.resolution,
                       stop_at=agent if margin is not None else None,
                       margin=margin if margin is not None else math.inf)
    return DistanceField(values, goal, grid.config)


def _segment_finite(field: DistanceField, x0: float, y0: float, x1: float, y1: float) -> bool:
    ox, oy = field.config.origin
    r = field.config.resolution
    cells = segment_cells((x0 - ox) / r, (y0 - oy) / r, (x1 - ox) / r, (y1 - oy) / r)
    xs, ys = cells[:, 0], cells[:, 1]
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= field.config.width or ys.max() >= field.config.height:
        return False
    return bool(np.all(np.isfinite(field.values[ys, xs])))


def next_action(field: DistanceField, pose: Pose,
                params: ActionParams = ActionParams()) -> Union[Action, ReplanRequest]:
    """One greedy step down the field.

    The descent direction is the reachable heading (current heading plus a
    multiple of the turn angle) whose forward landing point has the lowest
    field value; segments that cross an infinite cell are not allowed. Move
    forward when that heading is within the alignment tolerance, otherwise turn
    the shorter way towards it.
    """
    v0 = field.at_world(pose.x, pose.y)
    if not math.isfinite(v0):
        return ReplanRequest("pose on a cell with infinite field value")
    n = max(1, int(round(360.0 / params.turn_angle)))
    best = None
    for k in range(n):
        turns = min(k, n - k)
        heading = math.radians(pose.theta + k * params.turn_angle)
        x1 = pose.x + params.forward_step * math.cos(heading)
        y1 = pose.y + params.forward_step * math.sin(heading)
        if not _segment_finite(field, pose.x, pose.y, x1, y1):
            continue
        v = field.at_world(x1, y1)
        key = (v, turns, 0 if k <= n - k else 1)
        if best is None or key < best[0]:
            best = (key, k)
    if best is None or best[0][0] >= v0 - 1e-9:
        return ReplanRequest("no descending move from this pose")
    k = best[1]
    err = ((k * params.turn_angle + 180.0) % 360.0) - 180.0
    if abs(err) <= params.align_tolerance:
        return Action.MOVE_FORWARD
    return Action.TURN_LEFT if k <= n - k else Action.TURN_RIGHT


def reached(pose: Pose, target: tuple[float, float], radius: float) -> bool:
    """Closed-ball arrival test."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return math.hypot(pose.x - target[0], pose.y - target[1]) <= radius + 1e-12
