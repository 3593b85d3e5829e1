"""Instance-level scene graph: detection fusion, geometric relations, corrections."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .occupancy import Cell, GridConfig, Pose

RELATIONS = ("next to", "on top of", "inside of", "under", "hang on")
CORRECTION_KINDS = ("merge", "relabel", "delete", "set_room", "set_edge")
VIEW_SEPARATION = 45.0


def quantize_bearing(bearing_deg: float) -> int:
    """Whole-degree bearing in [0, 360)."""
    return int(math.floor(bearing_deg % 360.0 + 0.5)) % 360


def _circ(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


def distinct_viewpoints(bearings: Iterable[int], separation: float = VIEW_SEPARATION) -> int:
    """Size of the largest subset of ``bearings`` that are pairwise ``separation`` apart.

    Greedy from every start point; on a circle this is exact.
    """
    pts = sorted({b % 360 for b in bearings})
    if not pts:
        return 0
    best = 1
    n = len(pts)
    for i in range(n):
        chosen = [pts[i]]
        for k in range(1, n):
            b = pts[(i + k) % n]
            if (b - chosen[-1]) % 360 >= separation and (pts[i] - b) % 360 >= separation:
                chosen.append(b)
        best = max(best, len(chosen))
    return best


@dataclass
class InstanceNode:
    id: int
    category: str
    footprint: set
    z_interval: tuple[float, float]
    centroid: tuple[float, float]
    confidence: float
    room_type: Optional[str] = None
    viewpoints_seen: set = field(default_factory=set)  # whole-degree observer bearings
    last_updated: int = 0
    wall_mounted: bool = False

    @property
    def viewpoint_count(self) -> int:
        return distinct_viewpoints(self.viewpoints_seen)

    @property
    def z_min(self) -> float:
        return self.z_interval[0]

    @property
    def z_max(self) -> float:
        return self.z_interval[1]


@dataclass(frozen=True)
class RelationEdge:
    src: int
    dst: int
    relation: str


@dataclass(frozen=True)
class Detection:
    category: str
    footprint: frozenset
    z_interval: tuple[float, float]
    confidence: float
    observer_pose: Pose
    step: int
    wall_mounted: bool = False

    def __post_init__(self) -> None:
        if not self.footprint:
            raise ValueError("detection footprint must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("detection confidence must lie in [0, 1]")


@dataclass(frozen=True)
class Correction:
    kind: str
    a: int
    b: Optional[int] = None
    label: Optional[str] = None

    @classmethod
    def merge(cls, a: int, b: int) -> "Correction":
        return cls("merge", a, b)

    @classmethod
    def relabel(cls, a: int, category: str) -> "Correction":
        return cls("relabel", a, label=category)

    @classmethod
    def delete(cls, a: int) -> "Correction":
        return cls("delete", a)

    @classmethod
    def set_room(cls, a: int, room: str) -> "Correction":
        return cls("set_room", a, label=room)

    @classmethod
    def set_edge(cls, a: int, b: int, relation: Optional[str]) -> "Correction":
        return cls("set_edge", a, b, relation)


@dataclass(frozen=True)
class CorrectionError:
    index: int
    correction: Correction
    reason: str


def _footprint_centroid(cells: Iterable[Cell], config: GridConfig) -> tuple[float, float]:
    arr = np.asarray(sorted(cells), dtype=float)
    mx, my = arr.mean(axis=0)
    ox, oy = config.origin
    return ox + (mx + 0.5) * config.resolution, oy + (my + 0.5) * config.resolution


def _z_overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return min(a[1], b[1]) - max(a[0], b[0])


class SceneGraph:
    """Instance nodes with directed relation edges.

    Edges are stored per ordered pair; ``on top of`` and ``under`` are always
    kept as an inverse pair and ``next to`` is stored in both directions.
    """

    def __init__(self, config: GridConfig, merge_radius: float = 0.5,
                 relation_radius: float = 2.0, next_to_threshold: float = 1.0) -> None:
        self.config = config
        self.merge_radius = merge_radius
        self.relation_radius = relation_radius
        self.next_to_threshold = next_to_threshold
        self.nodes: dict[int, InstanceNode] = {}
        self.edges: dict[tuple[int, int], str] = {}
        self._next_id = 0
        self._trees: dict[int, cKDTree] = {}

    # -- queries -----------------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    def edge_set(self) -> set[RelationEdge]:
        return {RelationEdge(s, d, r) for (s, d), r in self.edges.items()}

    def edges_of(self, nid: int) -> list[RelationEdge]:
        return [RelationEdge(s, d, r) for (s, d), r in sorted(self.edges.items()) if s == nid]

    def neighbors_within(self, point: tuple[float, float], radius: float) -> list[InstanceNode]:
        if radius <= 0:
            raise ValueError("radius must be positive")
        hits = []
        for node in self.nodes.values():
            d = math.hypot(node.centroid[0] - point[0], node.centroid[1] - point[1])
            if d <= radius:
                hits.append((d, node.id, node))
        hits.sort(key=lambda t: (t[0], t[1]))
        return [h[2] for h in hits]

    def by_category(self, category: str) -> list[InstanceNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.category == category]

    # -- fusion ------------------------------------------------------------
    def fuse_detection(self, det: Detection) -> int:
        """Merge into the nearest compatible node or create a new one."""
        cen = _footprint_centroid(det.footprint, self.config)
        ox, oy = det.observer_pose.x, det.observer_pose.y
        bearing = math.degrees(math.atan2(oy - cen[1], ox - cen[0]))
        best = None
        for node in self.nodes.values():
            if node.category != det.category:
                continue
            d = math.hypot(node.centroid[0] - cen[0], node.centroid[1] - cen[1])
            if d <= self.merge_radius + 1e-9 and _z_overlap(node.z_interval, det.z_interval) > 0:
                key = (d, node.id)
                if best is None or key < best[0]:
                    best = (key, node)
        if best is None:
            nid = self._next_id
            self._next_id += 1
            self.nodes[nid] = InstanceNode(
                id=nid, category=det.category, footprint=set(det.footprint),
                z_interval=tuple(det.z_interval), centroid=cen, confidence=float(det.confidence),
                viewpoints_seen={quantize_bearing(bearing)}, last_updated=det.step, wall_mounted=det.wall_mounted)
            return nid
        node = best[1]
        node.footprint |= det.footprint
        node.z_interval = (min(node.z_min, det.z_interval[0]), max(node.z_max, det.z_interval[1]))
        node.centroid = _footprint_centroid(node.footprint, self.config)
        node.confidence = max(node.confidence, float(det.confidence))
        node.viewpoints_seen.add(quantize_bearing(bearing))
        node.last_updated = det.step
        node.wall_mounted = node.wall_mounted or det.wall_mounted
        self._trees.pop(node.id, None)
        return node.id

    # -- relations ---------------------------------------------------------
    def _tree(self, nid: int) -> cKDTree:
        tree = self._trees.get(nid)
        if tree is None:
            tree = cKDTree(np.asarray(sorted(self.nodes[nid].footprint), dtype=float))
            self._trees[nid] = tree
        return tree

    def footprint_gap(self, a: int, b: int) -> float:
        """Edge-to-edge gap between two footprints in metres (0 when touching)."""
        ta, tb = self._tree(a), self._tree(b)
        small, big = (ta, tb) if ta.n <= tb.n else (tb, ta)
        d, _ = big.query(small.data, k=1)
        return max(0.0, float(d.min()) - 1.0) * self.config.resolution

    def relation_between(self, a: int, b: int) -> Optional[tuple[int, str, int]]:
        """Geometric relation for an unordered pair as (src, relation, dst), or None."""
        na, nb = self.nodes[a], self.nodes[b]
        fa, fb = na.footprint, nb.footprint
        inter = len(fa & fb)
        if inter and inter >= 0.5 * min(len(fa), len(fb)):
            if abs(na.z_min - nb.z_max) <= 0.1 + 1e-12:
                return (a, "on top of", b)
            if abs(nb.z_min - na.z_max) <= 0.1 + 1e-12:
                return (b, "on top of", a)
        if inter:
            if inter >= 0.9 * len(fa) and nb.z_min <= na.z_min and na.z_max <= nb.z_max:
                return (a, "inside of", b)
            if inter >= 0.9 * len(fb) and na.z_min <= nb.z_min and nb.z_max <= na.z_max:
                return (b, "inside of", a)
        if nb.wall_mounted and na.z_min >= 0.5 and self._adjacent4(fa, fb):
            return (a, "hang on", b)
        if na.wall_mounted and nb.z_min >= 0.5 and self._adjacent4(fb, fa):
            return (b, "hang on", a)
        if _z_overlap(na.z_interval, nb.z_interval) > 0 and self.footprint_gap(a, b) < self.next_to_threshold:
            return (a, "next to", b)
        return None

    @staticmethod
    def _adjacent4(fa: set, fb: set) -> bool:
        for (x, y) in fa:
            if ((x + 1, y) in fb or (x - 1, y) in fb or (x, y + 1) in fb
                    or (x, y - 1) in fb or (x, y) in fb):
                return True
        return False

    def _clear_pair(self, a: int, b: int) -> None:
        self.edges.pop((a, b), None)
        self.edges.pop((b, a), None)

    def _put(self, src: int, rel: str, dst: int) -> None:
        self._clear_pair(src, dst)
        self.edges[(src, dst)] = rel
        if rel == "on top of":
            self.edges[(dst, src)] = "under"
        elif rel == "under":
            self.edges[(dst, src)] = "on top of"
        elif rel == "next to":
            self.edges[(dst, src)] = "next to"

    def infer_spatial_relations(self, changed_ids: Iterable[int]) -> set[RelationEdge]:
        """Recompute relations between changed nodes and their neighbours."""
        out: set[RelationEdge] = set()
        done: set[tuple[int, int]] = set()
        for a in sorted(set(changed_ids)):
            if a not in self.nodes:
                raise KeyError(f"unknown instance id {a}")
            for nb in self.neighbors_within(self.nodes[a].centroid, self.relation_radius):
                b = nb.id
                pair = (min(a, b), max(a, b))
                if b == a or pair in done:
                    continue
                done.add(pair)
                rel = self.relation_between(a, b)
                self._clear_pair(a, b)
                if rel is None:
                    continue
                self._put(rel[0], rel[1], rel[2])
                for key in ((rel[0], rel[2]), (rel[2], rel[0])):
                    if key in self.edges:
                        out.add(RelationEdge(key[0], key[1], self.edges[key]))
        return out

    # -- corrections -------------------------------------------------------
    def apply_corrections(self, batch: Iterable[Correction]) -> list[CorrectionError]:
        """Apply corrections in order; rejected items are reported, not raised."""
        errors: list[CorrectionError] = []
        for i, c in enumerate(batch):
            reason = self._apply_one(c)
            if reason:
                errors.append(CorrectionError(i, c, reason))
        return errors

    def _apply_one(self, c: Correction) -> Optional[str]:
        if c.kind not in CORRECTION_KINDS:
            return f"unknown correction kind {c.kind!r}"
        if c.a not in self.nodes:
            return f"dangling id {c.a}"
        if c.kind in ("merge", "set_edge") and c.b not in self.nodes:
            return f"dangling id {c.b}"
        if c.kind == "merge":
            if c.a == c.b:
                return "cannot merge a node with itself"
            self._merge(min(c.a, c.b), max(c.a, c.b))
        elif c.kind == "relabel":
            if not c.label:
                return "relabel needs a category"
            self.nodes[c.a].category = c.label
        elif c.kind == "delete":
            self._delete(c.a)
        elif c.kind == "set_room":
            self.nodes[c.a].room_type = c.label
        else:
            if c.a == c.b:
                return "self edge"
            if c.label is None:
                self._clear_pair(c.a, c.b)
            elif c.label not in RELATIONS:
                return f"unknown relation {c.label!r}"
            else:
                self._put(c.a, c.label, c.b)
        return None

    def _merge(self, keep: int, gone: int) -> None:
        k, g = self.nodes[keep], self.nodes[gone]
        k.footprint |= g.footprint
        k.z_interval = (min(k.z_min, g.z_min), max(k.z_max, g.z_max))
        k.centroid = _footprint_centroid(k.footprint, self.config)
        k.confidence = max(k.confidence, g.confidence)
        k.viewpoints_seen |= g.viewpoints_seen
        k.last_updated = max(k.last_updated, g.last_updated)
        k.wall_mounted = k.wall_mounted or g.wall_mounted
        if k.room_type is None:
            k.room_type = g.room_type
        moved = {}
        for (s, d), r in list(self.edges.items()):
            if gone in (s, d):
                del self.edges[(s, d)]
                s2, d2 = (keep if s == gone else s), (keep if d == gone else d)
                if s2 != d2:
                    moved[(s2, d2)] = r
        for key, r in sorted(moved.items()):
            self.edges.setdefault(key, r)
        self._repair_inverses()
        del self.nodes[gone]
        self._trees.pop(keep, None)
        self._trees.pop(gone, None)

    def _repair_inverses(self) -> None:
        """After a merge, keep one relation per pair (highest priority) in canonical form."""
        rank = {"on top of": 0, "under": 0, "inside of": 1, "hang on": 2, "next to": 3}
        pairs: dict[tuple[int, int], list] = {}
        for (s, d), r in self.edges.items():
            pairs.setdefault((min(s, d), max(s, d)), []).append((rank[r], s, r, d))
        for pair, items in sorted(pairs.items()):
            _, s, r, d = min(items)
            self._put(s, r, d)

    def _delete(self, nid: int) -> None:
        del self.nodes[nid]
        self._trees.pop(nid, None)
        for key in [k for k in self.edges if nid in k]:
            del self.edges[key]

    # -- checks and dumps --------------------------------------------------
    def check_invariants(self) -> None:
        for nid, n in self.nodes.items():
            assert n.id == nid
            assert n.footprint, f"node {nid} has an empty footprint"
            assert n.z_min <= n.z_max
            assert 0.0 <= n.confidence <= 1.0
            assert n.viewpoints_seen
        for (s, d), r in self.edges.items():
            assert s != d and s in self.nodes and d in self.nodes, f"dangling edge {(s, d)}"
            assert r in RELATIONS
            if r == "on top of":
                assert self.edges.get((d, s)) == "under"
            if r == "under":
                assert self.edges.get((d, s)) == "on top of"

    def to_dict(self) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            nodes.append({
                "id": n.id,
                "category": n.category,
                "footprint": [list(c) for c in sorted(n.footprint)],
                "z_interval": [round(n.z_min, 6), round(n.z_max, 6)],
                "centroid": [round(n.centroid[0], 6), round(n.centroid[1], 6)],
                "confidence": round(n.confidence, 6),
                "room_type": n.room_type,
                "viewpoints_seen": sorted(n.viewpoints_seen),
                "last_updated": n.last_updated,
                "wall_mounted": n.wall_mounted,
            })
        edges = [{"src": s, "dst": d, "relation": r} for (s, d), r in sorted(self.edges.items())]
        return {"nodes": nodes, "edges": edges}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)
