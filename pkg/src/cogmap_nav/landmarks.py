"""Reduced-Voronoi landmark graph built from the occupancy map.

Free space is thinned to a one-cell skeleton (Zhang-Suen). Junctions and leaves
of the skeleton become landmarks, leaves are attached to the object or frontier
they point at, and skeleton path lengths between neighbouring landmarks become
edge weights.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra as cs_dijkstra
from scipy.spatial import cKDTree

from .errors import EmptyMapError
from .occupancy import Cell, FrontierCluster, OccupancyGrid, Pose, frontier_mask, label_groups
from .scene_graph import SceneGraph

SQRT2 = math.sqrt(2.0)
_EIGHT = np.ones((3, 3), dtype=bool)

# ring order N, NE, E, SE, S, SW, W, NW as (dy, dx) in array rows
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


@dataclass(frozen=True)
class LandmarkParams:
    leaf_map_radius: float = 1.0
    fuse_radius: float = 0.5
    frontier_radius: float = 1.0
    carry_radius: float = 0.5
    room_radius: float = 2.0
    min_component: int = 9


@dataclass(frozen=True)
class Mapping:
    kind: str  # "instance" | "frontier" | "junction"
    ref: Optional[int] = None

    def __str__(self) -> str:
        return self.kind if self.ref is None else f"{self.kind}({self.ref})"


JUNCTION = Mapping("junction")


@dataclass
class Landmark:
    id: int
    cell: Cell
    world_pos: tuple[float, float]
    frontier: bool = False
    explored: bool = False
    mapping: Mapping = JUNCTION
    room: Optional[str] = None
    role: str = "junction"  # junction | leaf | fused | promoted | fallback


@dataclass
class LandmarkGraph:
    landmarks: dict[int, Landmark] = field(default_factory=dict)
    adjacency: dict[int, dict[int, float]] = field(default_factory=dict)
    skeleton: Optional[np.ndarray] = None
    _sp_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.landmarks)

    def ids(self) -> list[int]:
        return sorted(self.landmarks)

    def add_edge(self, a: int, b: int, length: float) -> None:
        if a == b or not length > 0:
            raise ValueError("edges need distinct endpoints and positive length")
        cur = self.adjacency.setdefault(a, {}).get(b)
        if cur is None or length < cur:
            self.adjacency[a][b] = length
            self.adjacency.setdefault(b, {})[a] = length
        self._sp_cache.clear()

    def edge_list(self) -> list[tuple[int, int, float]]:
        out = []
        for a in sorted(self.adjacency):
            for b in sorted(self.adjacency[a]):
                if a < b:
                    out.append((a, b, self.adjacency[a][b]))
        return out

    def single_source(self, src: int) -> dict[int, tuple[float, tuple[int, ...]]]:
        """Dijkstra from ``src``: id -> (distance, path) with lexicographic tie-breaks."""
        if src not in self.landmarks:
            raise KeyError(f"unknown landmark id {src}")
        hit = self._sp_cache.get(src)
        if hit is not None:
            return hit
        eps = 1e-9
        best: dict[int, tuple[float, tuple[int, ...]]] = {src: (0.0, (src,))}
        heap = [(0.0, (src,))]
        done: set[int] = set()
        while heap:
            d, path = heapq.heappop(heap)
            u = path[-1]
            if u in done or best[u] != (d, path):
                continue
            done.add(u)
            for v, w in self.adjacency.get(u, {}).items():
                if v in done:
                    continue
                nd, npath = d + w, path + (v,)
                cur = best.get(v)
                if cur is None or nd < cur[0] - eps or (abs(nd - cur[0]) <= eps and npath < cur[1]):
                    best[v] = (nd, npath)
                    heapq.heappush(heap, (nd, npath))
        self._sp_cache[src] = best
        return best

    def shortest_path(self, a: int, b: int) -> tuple[list[int], float]:
        """Minimum-length path; ``([], inf)`` when ``b`` is unreachable."""
        if b not in self.landmarks:
            raise KeyError(f"unknown landmark id {b}")
        hit = self.single_source(a).get(b)
        if hit is None:
            return [], math.inf
        return list(hit[1]), hit[0]

    def nearest(self, point: tuple[float, float]) -> Optional[int]:
        best = None
        for lid, lm in self.landmarks.items():
            d = math.hypot(lm.world_pos[0] - point[0], lm.world_pos[1] - point[1])
            if best is None or (d, lid) < best:
                best = (d, lid)
        return None if best is None else best[1]

    def mark_explored(self, lid: int) -> None:
        self.landmarks[lid].explored = True

    def check_invariants(self, grid: Optional[OccupancyGrid] = None) -> None:
        for lid, lm in self.landmarks.items():
            assert lm.id == lid
            if grid is not None:
                x, y = lm.cell
                assert grid.explored[y, x] and not grid.obstacle[y, x], f"landmark {lid} not traversable"
        for a, nbrs in self.adjacency.items():
            for b, w in nbrs.items():
                assert a in self.landmarks and b in self.landmarks
                assert w > 0
                assert self.adjacency[b][a] == w


# -- thinning ---------------------------------------------------------------

@numba.njit(cache=True)
def _zhang_suen(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    a = np.zeros((h + 2, w + 2), dtype=np.uint8)
    a[1:-1, 1:-1] = img
    marks = np.zeros((h * w, 2), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for sub in range(2):
            n = 0
            for r in range(1, h + 1):
                for c in range(1, w + 1):
                    if a[r, c] == 0:
                        continue
                    p2 = a[r - 1, c]
                    p3 = a[r - 1, c + 1]
                    p4 = a[r, c + 1]
                    p5 = a[r + 1, c + 1]
                    p6 = a[r + 1, c]
                    p7 = a[r + 1, c - 1]
                    p8 = a[r, c - 1]
                    p9 = a[r - 1, c - 1]
                    b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
                    if b < 2 or b > 6:
                        continue
                    t = ((p2 == 0 and p3 == 1) + (p3 == 0 and p4 == 1) + (p4 == 0 and p5 == 1)
                         + (p5 == 0 and p6 == 1) + (p6 == 0 and p7 == 1) + (p7 == 0 and p8 == 1)
                         + (p8 == 0 and p9 == 1) + (p9 == 0 and p2 == 1))
                    if t != 1:
                        continue
                    if sub == 0:
                        if p2 * p4 * p6 != 0 or p4 * p6 * p8 != 0:
                            continue
                    else:
                        if p2 * p4 * p8 != 0 or p2 * p6 * p8 != 0:
                            continue
                    marks[n, 0] = r
                    marks[n, 1] = c
                    n += 1
            for i in range(n):
                a[marks[i, 0], marks[i, 1]] = 0
            if n > 0:
                changed = True
    return a[1:-1, 1:-1].copy()


def thin(mask: np.ndarray, min_component: int = 9) -> np.ndarray:
    """Zhang-Suen thinning, then seed every large component the thinning emptied."""
    skel = _zhang_suen(np.ascontiguousarray(mask, dtype=np.uint8)).astype(bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        has = np.bincount(labels[skel], minlength=n + 1) > 0
        missing = [k for k in range(1, n + 1) if sizes[k] >= min_component and not has[k]]
        if missing:
            dt = ndimage.distance_transform_edt(mask)
            groups = label_groups(labels, n)
            for k in missing:
                ys, xs = groups[k - 1]
                j = int(np.argmax(dt[ys, xs]))
                skel[ys[j], xs[j]] = True
    return skel


def skeletonize(grid: OccupancyGrid, min_component: int = 9) -> set[Cell]:
    """Thin the traversable area of ``grid`` to a one-cell-wide skeleton."""
    mask = grid.traversable()
    if not mask.any():
        raise EmptyMapError("no traversable cells to skeletonize")
    ys, xs = np.nonzero(thin(mask, min_component))
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def _ring_stats(skel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour count and number of distinct neighbour runs around each cell."""
    p = np.pad(skel, 1)
    h, w = skel.shape
    ring = [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _RING]
    count = np.zeros(skel.shape, dtype=np.int64)
    runs = np.zeros(skel.shape, dtype=np.int64)
    for k in range(8):
        count += ring[k]
        runs += ring[k] & ~ring[(k + 1) % 8]
    return count, runs


def classify_skeleton(skel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Junction and leaf masks. Branches are counted as runs in the 8-ring."""
    count, runs = _ring_stats(skel)
    junction = skel & (runs >= 3)
    leaf = skel & ((count == 1) | ((count == 2) & (runs == 1)))
    return junction, leaf


# -- reduction --------------------------------------------------------------

def _leaf_direction(skel: np.ndarray, leaf: Cell, depth: int = 4) -> Optional[np.ndarray]:
    h, w = skel.shape
    seen = {leaf}
    frontier = [leaf]
    for _ in range(depth):
        nxt = []
        for (x, y) in frontier:
            for dy, dx in _RING:
                q = (x + dx, y + dy)
                if 0 <= q[0] < w and 0 <= q[1] < h and skel[q[1], q[0]] and q not in seen:
                    seen.add(q)
                    nxt.append(q)
        if not nxt:
            break
        frontier = nxt
    if frontier == [leaf]:
        return None
    back = np.mean(np.asarray(frontier, dtype=float), axis=0)
    v = np.asarray(leaf, dtype=float) - back
    n = np.hypot(v[0], v[1])
    return None if n < 1e-12 else v / n


class _Targets:
    """Candidate target cells for leaf mapping: instance footprints then frontier clusters."""

    def __init__(self, scene: Optional[SceneGraph], frontiers: list[FrontierCluster]):
        pts, kinds, refs = [], [], []
        if scene is not None:
            for nid in sorted(scene.nodes):
                for c in sorted(scene.nodes[nid].footprint):
                    pts.append(c)
                    kinds.append(0)
                    refs.append(nid)
        for fc in frontiers:
            for c in sorted(fc.cells):
                pts.append(c)
                kinds.append(1)
                refs.append(fc.id)
        self.pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        self.kinds = np.asarray(kinds, dtype=np.int64)
        self.refs = np.asarray(refs, dtype=np.int64)
        self.tree = cKDTree(self.pts) if len(pts) else None

    def pick(self, leaf: Cell, direction: Optional[np.ndarray], radius_cells: float) -> Mapping:
        if self.tree is None:
            return JUNCTION
        idx = self.tree.query_ball_point(leaf, radius_cells + 1e-9)
        if not idx:
            return JUNCTION
        idx = np.asarray(sorted(idx))
        v = self.pts[idx] - np.asarray(leaf, dtype=float)
        if direction is not None:
            ahead = v @ direction >= -1e-9
            idx, v = idx[ahead], v[ahead]
            if len(idx) == 0:
                return JUNCTION
        d = np.hypot(v[:, 0], v[:, 1])
        order = np.lexsort((self.refs[idx], self.kinds[idx], d))
        j = idx[order[0]]
        return Mapping("instance" if self.kinds[j] == 0 else "frontier", int(self.refs[j]))


def _single_linkage(points: list[Cell], radius: float) -> list[list[int]]:
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(points[i], points[j]) <= radius + 1e-9:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _nearest_free_skeleton(cells: np.ndarray, owned: set, target: np.ndarray) -> Optional[Cell]:
    d2 = ((cells - target) ** 2).sum(axis=1)
    for j in np.lexsort((cells[:, 0], cells[:, 1], d2)):
        c = (int(cells[j, 0]), int(cells[j, 1]))
        if c not in owned:
            return c
    return None


@dataclass
class _Proto:
    cells: list  # all cells owned (junction clusters own several)
    rep: Cell
    mapping: Mapping
    role: str


def reduce_to_landmarks(skeleton, grid: OccupancyGrid, scene: Optional[SceneGraph],
                        frontiers: list[FrontierCluster],
                        params: LandmarkParams = LandmarkParams()) -> LandmarkGraph:
    """Junctions, leaves, fused and promoted landmarks plus skeleton-length edges."""
    h, w = grid.shape
    res = grid.resolution
    if isinstance(skeleton, np.ndarray):
        skel = skeleton.astype(bool)
    else:
        skel = np.zeros((h, w), dtype=bool)
        for (x, y) in skeleton:
            skel[y, x] = True
    protos: list[_Proto] = []
    junction, leaf = classify_skeleton(skel)

    jl, nj = ndimage.label(junction, structure=_EIGHT)
    for ys, xs in label_groups(jl, nj):
        pts = np.stack([xs, ys], axis=1)
        rep = _nearest_free_skeleton(pts, set(), pts.mean(axis=0))
        protos.append(_Proto([(int(x), int(y)) for x, y in pts], rep, JUNCTION, "junction"))

    targets = _Targets(scene, frontiers)
    rad = params.leaf_map_radius / res
    leaves: list[tuple[Cell, Mapping]] = []
    for y, x in zip(*np.nonzero(leaf)):
        c = (int(x), int(y))
        leaves.append((c, targets.pick(c, _leaf_direction(skel, c), rad)))

    # fuse leaves pointing at the same instance
    by_inst: dict[int, list[Cell]] = {}
    for c, m in leaves:
        if m.kind == "instance":
            by_inst.setdefault(m.ref, []).append(c)
    owned = {c for p in protos for c in p.cells}
    sk_pts = np.stack(np.nonzero(skel)[::-1], axis=1) if skel.any() else np.zeros((0, 2), int)
    fused_away: set[Cell] = set()
    fused: list[_Proto] = []
    for inst in sorted(by_inst):
        cells = sorted(by_inst[inst], key=lambda c: (c[1], c[0]))
        for group in _single_linkage(cells, params.fuse_radius / res):
            if len(group) < 2:
                continue
            members = [cells[i] for i in group]
            fused_away.update(members)
            rep = _nearest_free_skeleton(sk_pts, owned, np.mean(np.asarray(members, float), axis=0))
            if rep is not None:
                owned.add(rep)
                fused.append(_Proto([rep], rep, Mapping("instance", inst), "fused"))
    for c, m in leaves:
        if c in fused_away or c in owned:
            continue
        owned.add(c)
        protos.append(_Proto([c], c, m, "leaf"))
    protos.extend(fused)

    # promote skeleton cells so that observed instances get at least two landmarks
    if scene is not None and len(sk_pts):
        sk_tree = cKDTree(sk_pts.astype(float))
        count: dict[int, list[Cell]] = {}
        for p in protos:
            if p.mapping.kind == "instance":
                count.setdefault(p.mapping.ref, []).append(p.rep)
        for nid in sorted(scene.nodes):
            have = count.get(nid, [])
            if len(have) >= 2:
                continue
            fp = np.asarray(sorted(scene.nodes[nid].footprint), dtype=float)
            near = set()
            for lst in sk_tree.query_ball_point(fp, rad + 1e-9):
                near.update(lst)
            cand = [(int(sk_pts[j, 0]), int(sk_pts[j, 1])) for j in near]
            cand = sorted((c for c in cand if c not in owned), key=lambda c: (c[1], c[0]))
            if not cand:
                continue
            ca = np.asarray(cand, dtype=float)
            cen = fp.mean(axis=0)
            while len(have) < 2 and cand:
                if have:
                    # spread views: widest angle, seen from the instance, to the existing landmarks
                    dd = np.min(np.stack([np.hypot(*(ca - np.asarray(hc, float)).T) for hc in have]), axis=0)
                    ang = np.arctan2(ca[:, 1] - cen[1], ca[:, 0] - cen[0])
                    spread = np.full(len(ca), np.pi)
                    for hc in have:
                        a0 = math.atan2(hc[1] - cen[1], hc[0] - cen[0])
                        spread = np.minimum(spread, np.abs((ang - a0 + np.pi) % (2 * np.pi) - np.pi))
                    spread[dd <= params.fuse_radius / res] = -1.0
                    j = int(np.lexsort((dd * -1.0, -np.round(spread, 3)))[0])
                    if spread[j] < 0:
                        break
                else:
                    dfp, _ = cKDTree(fp).query(ca)
                    j = int(np.argmin(dfp))
                c = cand.pop(j)
                ca = np.delete(ca, j, axis=0)
                owned.add(c)
                have = have + [c]
                count[nid] = have
                protos.append(_Proto([c], c, Mapping("instance", nid), "promoted"))

    # every skeleton component gets at least one landmark
    sl, ns = ndimage.label(skel, structure=_EIGHT)
    covered = {sl[c[1], c[0]] for p in protos for c in p.cells}
    for k, (ys, xs) in enumerate(label_groups(sl, ns), start=1):
        if k in covered:
            continue
        c = (int(xs[0]), int(ys[0]))
        protos.append(_Proto([c], c, JUNCTION, "fallback"))

    protos.sort(key=lambda p: (p.rep[1], p.rep[0]))
    graph = LandmarkGraph(skeleton=skel)
    for i, p in enumerate(protos):
        graph.landmarks[i] = Landmark(id=i, cell=p.rep, world_pos=grid.cell_to_world(p.rep),
                                      mapping=p.mapping, role=p.role)
        graph.adjacency[i] = {}
    _connect(graph, skel, protos, res)
    _set_frontier_flags(graph, grid, params)
    return graph


def _connect(graph: LandmarkGraph, skel: np.ndarray, protos: list[_Proto], res: float) -> None:
    """Edges between landmarks whose skeleton Voronoi regions touch."""
    h, w = skel.shape
    ys, xs = np.nonzero(skel)
    n = len(xs)
    if n == 0 or not protos:
        return
    index = np.full((h, w), -1, dtype=np.int64)
    index[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        y2, x2 = ys + dy, xs + dx
        ok = (y2 >= 0) & (y2 < h) & (x2 >= 0) & (x2 < w)
        ok[ok] &= skel[y2[ok], x2[ok]]
        a = np.arange(n)[ok]
        b = index[y2[ok], x2[ok]]
        rows.append(a)
        cols.append(b)
        vals.append(np.full(len(a), SQRT2 if dx and dy else 1.0))
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    owner = np.full(n, -1, dtype=np.int64)
    for lid, p in enumerate(protos):
        for (x, y) in p.cells:
            owner[index[y, x]] = lid
    sources = np.nonzero(owner >= 0)[0]
    dist, _, src = cs_dijkstra(mat, directed=False, indices=sources, min_only=True,
                               return_predecessors=True)
    region = np.where(src >= 0, owner[np.maximum(src, 0)], -1)
    # junction cells that belong to one landmark have zero internal distance
    la, lb = region[rows], region[cols]
    cross = (la != lb) & (la >= 0) & (lb >= 0)
    length = (dist[rows] + vals + dist[cols])[cross]
    pairs = {}
    for a, b, d in zip(la[cross], lb[cross], length):
        key = (min(a, b), max(a, b))
        if key not in pairs or d < pairs[key]:
            pairs[key] = d
    for (a, b), d in sorted(pairs.items()):
        graph.add_edge(int(a), int(b), float(d) * res)


def _set_frontier_flags(graph: LandmarkGraph, grid: OccupancyGrid, params: LandmarkParams) -> None:
    fy, fx = np.nonzero(frontier_mask(grid))
    if len(fx) == 0 or not graph.landmarks:
        for lm in graph.landmarks.values():
            lm.frontier = False
        return
    tree = cKDTree(np.stack([fx, fy], axis=1).astype(float))
    ids = graph.ids()
    pts = np.asarray([graph.landmarks[i].cell for i in ids], dtype=float)
    d, _ = tree.query(pts)
    for i, dd in zip(ids, d):
        graph.landmarks[i].frontier = bool(dd * grid.resolution < params.frontier_radius)


def _assign_rooms(graph: LandmarkGraph, scene: Optional[SceneGraph],
                  room_hints: Optional[dict], grid: OccupancyGrid, params: LandmarkParams) -> None:
    hint_tree = hint_labels = None
    if room_hints:
        cells = sorted(room_hints)
        hint_tree = cKDTree(np.asarray(cells, dtype=float))
        hint_labels = [room_hints[c] for c in cells]
    for lm in graph.landmarks.values():
        room = None
        if scene is not None:
            votes: dict[str, int] = {}
            for node in scene.neighbors_within(lm.world_pos, params.room_radius):
                if node.room_type:
                    votes[node.room_type] = votes.get(node.room_type, 0) + 1
            if votes:
                room = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        if room is None and hint_tree is not None:
            d, j = hint_tree.query(np.asarray(lm.cell, dtype=float))
            if d * grid.resolution <= params.room_radius:
                room = hint_labels[int(j)]
        lm.room = room


def refresh(previous: Optional[LandmarkGraph], grid: OccupancyGrid, scene: Optional[SceneGraph],
            frontiers: list[FrontierCluster], agent: Optional[Pose],
            room_hints: Optional[dict] = None,
            params: LandmarkParams = LandmarkParams()) -> LandmarkGraph:
    """Rebuild the graph from the current map and carry explored flags forward."""
    mask = grid.traversable()
    if not mask.any():
        return LandmarkGraph(skeleton=np.zeros(grid.shape, dtype=bool))
    skel = thin(mask, params.min_component)
    graph = reduce_to_landmarks(skel, grid, scene, frontiers, params)
    _assign_rooms(graph, scene, room_hints, grid, params)
    if previous is not None:
        old = [lm.cell for lm in previous.landmarks.values() if lm.explored]
        if old and graph.landmarks:
            tree = cKDTree(np.asarray(old, dtype=float))
            for lm in graph.landmarks.values():
                d, _ = tree.query(np.asarray(lm.cell, dtype=float))
                if d * grid.resolution <= params.carry_radius + 1e-9:
                    lm.explored = True
    if agent is not None and graph.landmarks:
        lid = graph.nearest((agent.x, agent.y))
        graph.landmarks[lid].explored = True
    return graph
