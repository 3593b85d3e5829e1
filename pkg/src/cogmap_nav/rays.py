"""Supercover ray traversal tables shared by the simulator and the mapper.

Rays start at the centre of the origin cell. Each table row lists the cells a
ray visits in order, with the entry and exit parameters measured in cells.
Cells touched only at a corner get ``t_in == t_out``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_TIE_EPS = 1e-9


def trace_ray(angle: float, max_t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cells crossed by a ray from (0.5, 0.5) in cell units.

    Returns integer offsets (K, 2) as (dx, dy) plus entry and exit distances.
    """
    c, s = math.cos(angle), math.sin(angle)
    if abs(c) < 1e-12:
        c = 0.0
    if abs(s) < 1e-12:
        s = 0.0
    sx = 1 if c > 0 else -1
    sy = 1 if s > 0 else -1
    tdx = 1.0 / abs(c) if c else math.inf
    tdy = 1.0 / abs(s) if s else math.inf
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    x = y = 0
    cells = [(0, 0)]
    t_in = [0.0]
    t_out = [math.nan]
    main = 0  # index of the current main (non-corner) cell
    while True:
        if abs(tmx - tmy) < _TIE_EPS:
            t = tmx
            if t > max_t:
                break
            t_out[main] = t
            cells.append((x + sx, y))
            t_in.append(t)
            t_out.append(t)
            cells.append((x, y + sy))
            t_in.append(t)
            t_out.append(t)
            x += sx
            y += sy
            tmx += tdx
            tmy += tdy
        elif tmx < tmy:
            t = tmx
            if t > max_t:
                break
            t_out[main] = t
            x += sx
            tmx += tdx
        else:
            t = tmy
            if t > max_t:
                break
            t_out[main] = t
            y += sy
            tmy += tdy
        cells.append((x, y))
        t_in.append(t)
        t_out.append(math.nan)
        main = len(cells) - 1
    t_out[main] = min(tmx, tmy)
    return (np.asarray(cells, dtype=np.int64).reshape(-1, 2),
            np.asarray(t_in), np.asarray(t_out))


@dataclass(frozen=True)
class RayTable:
    """Padded per-ray traversal arrays; shape (n_rays, K)."""

    dx: np.ndarray
    dy: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    valid: np.ndarray


@lru_cache(maxsize=65536)
def _trace_cached(angle: float, max_t: float):
    return trace_ray(angle, max_t)


@lru_cache(maxsize=256)
def _table_cached(angles: tuple[float, ...], max_t: float) -> RayTable:
    traces = [_trace_cached(a, max_t) for a in angles]
    k = max(len(tr[1]) for tr in traces)
    n = len(traces)
    dx = np.zeros((n, k), dtype=np.int64)
    dy = np.zeros((n, k), dtype=np.int64)
    tin = np.full((n, k), np.inf)
    tout = np.full((n, k), np.inf)
    valid = np.zeros((n, k), dtype=bool)
    for i, (cells, a, b) in enumerate(traces):
        m = len(a)
        dx[i, :m] = cells[:, 0]
        dy[i, :m] = cells[:, 1]
        tin[i, :m] = a
        tout[i, :m] = b
        valid[i, :m] = True
    for arr in (dx, dy, tin, tout, valid):
        arr.setflags(write=False)
    return RayTable(dx, dy, tin, tout, valid)


def ray_table(angles: np.ndarray, max_t: float) -> RayTable:
    """Cached traversal table for absolute ray angles (radians)."""
    key = tuple(round(float(a), 9) for a in np.asarray(angles).ravel())
    return _table_cached(key, round(float(max_t), 6))


def segment_cells(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Supercover cells of the segment between two points in cell units.

    Coordinates are continuous; cell (i, j) spans [i, i+1) x [j, j+1).
    Returns an (K, 2) array of (x, y) cells in visiting order.
    """
    cx, cy = math.floor(x0), math.floor(y0)
    ddx, ddy = x1 - x0, y1 - y0
    length = math.hypot(ddx, ddy)
    if length < 1e-12:
        return np.asarray([(cx, cy)], dtype=np.int64)
    c, s = ddx / length, ddy / length
    sx = 1 if c > 0 else -1
    sy = 1 if s > 0 else -1
    if abs(c) < 1e-12:
        tmx = tdx = math.inf
    else:
        tdx = 1.0 / abs(c)
        edge = cx + 1 if c > 0 else cx
        tmx = (edge - x0) / c
    if abs(s) < 1e-12:
        tmy = tdy = math.inf
    else:
        tdy = 1.0 / abs(s)
        edge = cy + 1 if s > 0 else cy
        tmy = (edge - y0) / s
    out = [(cx, cy)]
    while True:
        if abs(tmx - tmy) < _TIE_EPS:
            if tmx >= length:
                break
            out.append((cx + sx, cy))
            out.append((cx, cy + sy))
            cx += sx
            cy += sy
            tmx += tdx
            tmy += tdy
        elif tmx < tmy:
            if tmx >= length:
                break
            cx += sx
            tmx += tdx
        else:
            if tmy >= length:
                break
            cy += sy
            tmy += tdy
        out.append((cx, cy))
    return np.asarray(out, dtype=np.int64)
