"""Binary PPM (P6) snapshots of the cognitive map.

Colour table, fixed so output bytes are reproducible:

    unexplored     (128, 128, 128)
    free           (255, 255, 255)
    obstacle       (0, 0, 0)
    frontier       (0, 255, 255)
    agent          (255, 0, 0)
    path           (255, 170, 170)
    instances      INSTANCE_PALETTE[id % 16]
    landmark       (0, 0, 200), explored ones (120, 120, 200)
    candidate      (255, 0, 255)
    edges          (150, 150, 255)
    plan goal      (0, 160, 0)

Images are flipped so that +y points up. A bar of STATE_BAR_HEIGHT rows on top
carries the cognitive state colour.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import numpy as np

from .fsm_states import CognitiveState
from .occupancy import OccupancyGrid, frontier_mask
from .planner import DistanceField

UNEXPLORED = (128, 128, 128)
FREE = (255, 255, 255)
OBSTACLE = (0, 0, 0)
FRONTIER = (0, 255, 255)
AGENT = (255, 0, 0)
PATH = (255, 170, 170)
LANDMARK = (0, 0, 200)
LANDMARK_EXPLORED = (120, 120, 200)
CANDIDATE = (255, 0, 255)
EDGE = (150, 150, 255)
PLAN_GOAL = (0, 160, 0)

INSTANCE_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
)

STATE_COLORS = {
    CognitiveState.BS: (110, 110, 110),
    CognitiveState.CS: (46, 139, 87),
    CognitiveState.OT: (255, 165, 0),
    CognitiveState.CV: (65, 105, 225),
    CognitiveState.TC: (220, 20, 60),
}
STATE_BAR_HEIGHT = 6


def encode_ppm(img: np.ndarray) -> bytes:
    """P6 bytes for an (H, W, 3) uint8 image."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Inverse of encode_ppm for the header layout it writes."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit P6 image")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_ppm(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def grid_image(grid: OccupancyGrid, frontier: Optional[np.ndarray] = None) -> np.ndarray:
    """Base layer in array orientation (row 0 is y = 0)."""
    h, w = grid.shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = UNEXPLORED
    img[grid.explored] = FREE
    labels = grid.instance_label
    has = labels >= 0
    if has.any():
        pal = np.asarray(INSTANCE_PALETTE, dtype=np.uint8)
        img[has] = pal[labels[has] % len(INSTANCE_PALETTE)]
    img[grid.obstacle] = OBSTACLE
    fr = frontier_mask(grid) if frontier is None else frontier
    img[fr] = FRONTIER
    return img


def _put(img: np.ndarray, cell, color, half: int = 0) -> None:
    h, w, _ = img.shape
    x, y = cell
    img[max(0, y - half):min(h, y + half + 1), max(0, x - half):min(w, x + half + 1)] = color


def _line(img: np.ndarray, a, b, color) -> None:
    n = max(abs(b[0] - a[0]), abs(b[1] - a[1])) + 1
    xs = np.rint(np.linspace(a[0], b[0], n)).astype(int)
    ys = np.rint(np.linspace(a[1], b[1], n)).astype(int)
    h, w, _ = img.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[ok], xs[ok]] = color


def frame_image(frame) -> np.ndarray:
    """Full snapshot of a runner Frame, flipped for display, with the state bar."""
    img = grid_image(frame.grid, frame.frontier)
    for a, b in frame.edges:
        _line(img, frame.landmarks[a][0], frame.landmarks[b][0], EDGE)
    for cell in frame.path:
        _put(img, cell, PATH)
    cands = set(frame.candidates)
    for lid, (cell, _frontier, explored) in enumerate(frame.landmarks):
        color = CANDIDATE if lid in cands else (LANDMARK_EXPLORED if explored else LANDMARK)
        _put(img, cell, color, half=1)
    if frame.goal_cell is not None:
        _put(img, frame.goal_cell, PLAN_GOAL, half=1)
    _put(img, frame.agent, AGENT, half=1)
    img = img[::-1]
    bar = np.empty((STATE_BAR_HEIGHT, img.shape[1], 3), dtype=np.uint8)
    bar[:] = STATE_COLORS[frame.state]
    return np.concatenate([bar, img], axis=0)


def render_frames(frames: Sequence, out_dir: str, prefix: str = "frame") -> list[str]:
    """One PPM per frame, named ``{prefix}_{step:04d}.ppm``; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for fr in frames:
        path = os.path.join(out_dir, f"{prefix}_{fr.step:04d}.ppm")
        write_ppm(path, frame_image(fr))
        paths.append(path)
    return paths


def render_episode(world, result, out_dir: str) -> list[str]:
    """Write the decision snapshots recorded in ``result``.

    The episode must have been run with ``record_frames=True``; ``world`` only
    contributes the file prefix.
    """
    if not result.frames:
        raise ValueError("result carries no frames; run the episode with record_frames=True")
    return render_frames(result.frames, out_dir, prefix=f"seed{world.seed}")


def field_image(field: DistanceField) -> np.ndarray:
    """Grayscale view of a distance field: near is dark, far is light, unreachable is red."""
    v = field.values
    finite = np.isfinite(v)
    img = np.empty(v.shape + (3,), dtype=np.uint8)
    img[:] = (255, 0, 0)
    if finite.any():
        top = float(v[finite].max())
        scale = 255.0 / top if top > 0 else 0.0
        g = np.zeros(v.shape, dtype=np.uint8)
        g[finite] = np.clip(np.rint(v[finite] * scale), 0, 255).astype(np.uint8)
        img[finite] = np.repeat(g[finite][:, None], 3, axis=1)
    return img[::-1]
