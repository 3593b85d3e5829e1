import itertools
import json
import math

import pytest
from hypothesis import given, strategies as st

from cogmap_nav.occupancy import GridConfig, Pose
from cogmap_nav.scene_graph import (RELATIONS, Correction, Detection, RelationEdge, SceneGraph,
                                    distinct_viewpoints, quantize_bearing)

CFG = GridConfig(200, 200, 0.05)


def rect(x0, y0, w, h):
    return frozenset((x, y) for x in range(x0, x0 + w) for y in range(y0, y0 + h))


def det(cat, cells, z=(0.0, 0.8), pose=Pose(0.0, 0.0, 0.0), step=0, conf=0.8, wall=False):
    return Detection(cat, frozenset(cells), z, conf, pose, step, wall)


def cells_at(x, y, half=2):
    """Square footprint centred on world point (x, y) at 5 cm cells."""
    cx, cy = int(x / 0.05), int(y / 0.05)
    return rect(cx - half, cy - half, 2 * half + 1, 2 * half + 1)


# -- oracles -----------------------------------------------------------------

def brute_gap(fa, fb, res=0.05):
    d = min(math.hypot(ax - bx, ay - by) for ax, ay in fa for bx, by in fb)
    return max(0.0, d - 1.0) * res


def brute_relation(a, b):
    """Direct transcription of the geometric rule table, evaluated in priority order."""
    fa, fb = a["fp"], b["fp"]
    inter = len(fa & fb)
    zo = min(a["z"][1], b["z"][1]) - max(a["z"][0], b["z"][0])
    if inter and inter >= 0.5 * min(len(fa), len(fb)):
        if abs(a["z"][0] - b["z"][1]) <= 0.1 + 1e-12:
            return (a["id"], "on top of", b["id"])
        if abs(b["z"][0] - a["z"][1]) <= 0.1 + 1e-12:
            return (b["id"], "on top of", a["id"])
    if inter >= 0.9 * len(fa) and inter and b["z"][0] <= a["z"][0] and a["z"][1] <= b["z"][1]:
        return (a["id"], "inside of", b["id"])
    if inter >= 0.9 * len(fb) and inter and a["z"][0] <= b["z"][0] and b["z"][1] <= a["z"][1]:
        return (b["id"], "inside of", a["id"])

    def touches(p, q):
        return any((x + dx, y + dy) in q for x, y in p for dx, dy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)))
    if b["wall"] and a["z"][0] >= 0.5 and touches(fa, fb):
        return (a["id"], "hang on", b["id"])
    if a["wall"] and b["z"][0] >= 0.5 and touches(fb, fa):
        return (b["id"], "hang on", a["id"])
    if zo > 0 and brute_gap(fa, fb) < 1.0:
        return (a["id"], "next to", b["id"])
    return None


# -- viewpoints ---------------------------------------------------------------

def test_quantize_bearing_wraps():
    assert quantize_bearing(-90.0) == 270
    assert quantize_bearing(359.6) == 0
    assert quantize_bearing(12.4) == 12


@pytest.mark.parametrize("bearings,expected", [
    ([], 0), ([10], 1), ([0, 44], 1), ([0, 45], 2), ([350, 30], 1), ([0, 90, 180, 270], 4),
    ([0, 45, 90, 135, 180, 225, 270, 315], 8), ([0, 30, 60, 90], 2),
])
def test_distinct_viewpoints_examples(bearings, expected):
    assert distinct_viewpoints(bearings) == expected


@given(st.sets(st.integers(0, 359), max_size=9))
def test_distinct_viewpoints_matches_exhaustive_subsets(bearings):
    def ok(sub):
        return all(min((a - b) % 360, (b - a) % 360) >= 45 for a, b in itertools.combinations(sub, 2))
    best = max((len(s) for r in range(len(bearings) + 1) for s in itertools.combinations(sorted(bearings), r)
                if ok(s)), default=0)
    assert distinct_viewpoints(bearings) == best


# -- fusion -------------------------------------------------------------------

def test_first_detection_gets_id_zero():
    g = SceneGraph(CFG)
    assert g.fuse_detection(det("chair", cells_at(2.0, 2.0))) == 0
    assert len(g) == 1


def test_nearby_same_category_merges():
    g = SceneGraph(CFG, merge_radius=0.5)
    g.fuse_detection(det("chair", cells_at(2.0, 2.0), conf=0.6, pose=Pose(0.0, 2.0, 0.0)))
    nid = g.fuse_detection(det("chair", cells_at(2.1, 2.0), conf=0.9, pose=Pose(2.0, 0.0, 90.0), step=3))
    assert nid == 0 and len(g) == 1
    n = g.nodes[0]
    assert n.footprint == set(cells_at(2.0, 2.0) | cells_at(2.1, 2.0))
    assert n.confidence == 0.9 and n.last_updated == 3
    assert n.viewpoint_count == 2


def test_category_mismatch_blocks_merge():
    g = SceneGraph(CFG)
    g.fuse_detection(det("chair", cells_at(2.0, 2.0)))
    g.fuse_detection(det("plant", cells_at(2.0, 2.0)))
    assert len(g) == 2


def test_disjoint_height_blocks_merge():
    g = SceneGraph(CFG)
    g.fuse_detection(det("lamp", cells_at(2.0, 2.0), z=(0.0, 0.5)))
    g.fuse_detection(det("lamp", cells_at(2.0, 2.0), z=(1.5, 2.0)))
    assert len(g) == 2


@given(st.lists(st.tuples(st.sampled_from(["chair", "table"]), st.floats(1.0, 8.0), st.floats(1.0, 8.0)),
                min_size=1, max_size=12))
def test_fusion_matches_sequential_merge_rule(dets):
    g = SceneGraph(CFG)
    # oracle: replay the rule against a plain list of (category, centroid) with exhaustive search
    model = []
    for cat, x, y in dets:
        d = det(cat, cells_at(x, y))
        nid = g.fuse_detection(d)
        cands = []
        for i, m in enumerate(model):
            if m is None or m["cat"] != cat:
                continue
            cx = sum(c[0] for c in m["fp"]) / len(m["fp"])
            cy = sum(c[1] for c in m["fp"]) / len(m["fp"])
            dx = sum(c[0] for c in d.footprint) / len(d.footprint)
            dy = sum(c[1] for c in d.footprint) / len(d.footprint)
            dist = math.hypot(cx - dx, cy - dy) * 0.05
            if dist <= 0.5 + 1e-9:
                cands.append((dist, i))
        if cands:
            _, i = min(cands)
            model[i]["fp"] |= d.footprint
            assert nid == i
        else:
            model.append({"cat": cat, "fp": set(d.footprint)})
            assert nid == len(model) - 1
    assert len(g) == len(model)
    g.check_invariants()


def test_fusion_order_insensitive_for_independent_detections():
    spots = [("chair", 1.0, 1.0), ("table", 3.0, 1.0), ("chair", 5.0, 5.0), ("bed", 1.0, 6.0)]
    shapes = []
    for perm in itertools.permutations(spots):
        g = SceneGraph(CFG)
        for cat, x, y in perm:
            g.fuse_detection(det(cat, cells_at(x, y)))
        shapes.append(sorted((n.category, tuple(sorted(n.footprint))) for n in g.nodes.values()))
    assert all(s == shapes[0] for s in shapes)


def test_detection_validation():
    with pytest.raises(ValueError):
        det("chair", [])
    with pytest.raises(ValueError):
        det("chair", cells_at(1, 1), conf=1.5)


# -- relations ----------------------------------------------------------------

def test_book_on_table():
    g = SceneGraph(CFG)
    table = g.fuse_detection(det("table", rect(40, 40, 20, 12), z=(0.0, 0.75)))
    book = g.fuse_detection(det("book", rect(45, 44, 4, 3), z=(0.75, 0.8)))
    edges = g.infer_spatial_relations({book})
    assert edges == {RelationEdge(book, table, "on top of"), RelationEdge(table, book, "under")}
    assert g.edges[(book, table)] == "on top of" and g.edges[(table, book)] == "under"


def test_chairs_next_to_each_other():
    g = SceneGraph(CFG)
    a = g.fuse_detection(det("chair", rect(40, 40, 8, 8)))
    b = g.fuse_detection(det("chair", rect(54, 40, 8, 8)))  # centre gap 7 cells: 0.3 m edge gap
    assert g.footprint_gap(a, b) == pytest.approx(0.30)
    g.infer_spatial_relations({a, b})
    assert g.edges[(a, b)] == "next to" and g.edges[(b, a)] == "next to"


def test_far_objects_get_no_edge():
    g = SceneGraph(CFG)
    a = g.fuse_detection(det("chair", cells_at(1.0, 1.0)))
    b = g.fuse_detection(det("chair", cells_at(6.0, 1.0)))
    assert g.infer_spatial_relations({a, b}) == set()
    assert not g.edges


def test_picture_hangs_on_wall_object():
    g = SceneGraph(CFG)
    wall = g.fuse_detection(det("cabinet", rect(40, 40, 2, 10), z=(0.0, 2.0), wall=True))
    pic = g.fuse_detection(det("picture", rect(42, 42, 1, 4), z=(1.2, 1.6)))
    g.infer_spatial_relations({pic})
    assert g.edges[(pic, wall)] == "hang on"


def test_unchanged_pairs_keep_their_edges():
    g = SceneGraph(CFG)
    a = g.fuse_detection(det("chair", rect(40, 40, 8, 8)))
    b = g.fuse_detection(det("chair", rect(54, 40, 8, 8)))
    g.infer_spatial_relations({a, b})
    c = g.fuse_detection(det("plant", rect(150, 150, 4, 4)))
    g.infer_spatial_relations({c})
    assert g.edges[(a, b)] == "next to"


@given(st.integers(0, 2**31 - 1))
def test_relations_match_brute_force(seed):
    import random
    rnd = random.Random(seed)
    g = SceneGraph(CFG, relation_radius=50.0)
    recs = []
    for _ in range(rnd.randint(2, 6)):
        x0, y0 = rnd.randint(20, 60), rnd.randint(20, 60)
        w, h = rnd.randint(1, 12), rnd.randint(1, 12)
        z0 = rnd.choice([0.0, 0.4, 0.75, 1.2])
        z = (z0, z0 + rnd.choice([0.05, 0.35, 0.8]))
        wall = rnd.random() < 0.2
        fp = rect(x0, y0, w, h)
        # unique categories so fusion never merges
        nid = g.fuse_detection(det(f"obj{len(recs)}", fp, z=z, wall=wall))
        recs.append({"id": nid, "fp": set(fp), "z": z, "wall": wall})
    g.infer_spatial_relations(set(g.nodes))
    expected = {}
    for a, b in itertools.combinations(recs, 2):
        rel = brute_relation(a, b)
        if rel is None:
            continue
        s, r, d = rel
        expected[(s, d)] = r
        expected[(d, s)] = {"on top of": "under", "next to": "next to"}.get(r)
    expected = {k: v for k, v in expected.items() if v is not None}
    assert g.edges == expected
    g.check_invariants()


# -- corrections --------------------------------------------------------------

def _three_chairs():
    g = SceneGraph(CFG)
    a = g.fuse_detection(det("chair", rect(40, 40, 8, 8)))
    b = g.fuse_detection(det("chair", rect(54, 40, 8, 8)))
    c = g.fuse_detection(det("sofa", rect(54, 54, 8, 8)))
    g.infer_spatial_relations({a, b, c})
    return g


def test_merge_unions_into_lower_id_and_rewrites_edges():
    g = _three_chairs()
    assert g.apply_corrections([Correction.merge(1, 0)]) == []
    assert set(g.nodes) == {0, 2}
    assert g.nodes[0].footprint == set(rect(40, 40, 8, 8) | rect(54, 40, 8, 8))
    assert all(1 not in k for k in g.edges)
    g.check_invariants()


def test_relabel_leaves_edges_untouched():
    g = _three_chairs()
    before = dict(g.edges)
    g.apply_corrections([Correction.relabel(2, "armchair")])
    assert g.nodes[2].category == "armchair" and g.edges == before


def test_delete_cascades_edges():
    g = _three_chairs()
    assert (0, 1) in g.edges
    g.apply_corrections([Correction.delete(0)])
    assert 0 not in g.nodes and all(0 not in k for k in g.edges)
    g.check_invariants()


def test_dangling_id_rejected_rest_applied():
    g = _three_chairs()
    errs = g.apply_corrections([Correction.delete(9), Correction.set_room(1, "bedroom"),
                                Correction.merge(1, 42)])
    assert [e.index for e in errs] == [0, 2]
    assert g.nodes[1].room_type == "bedroom"


def test_set_edge_enforces_inverse_and_can_clear():
    g = _three_chairs()
    g.apply_corrections([Correction.set_edge(1, 2, "under")])
    assert g.edges[(1, 2)] == "under" and g.edges[(2, 1)] == "on top of"
    g.apply_corrections([Correction.set_edge(2, 1, None)])
    assert (1, 2) not in g.edges and (2, 1) not in g.edges
    errs = g.apply_corrections([Correction.set_edge(0, 1, "beside"), Correction.set_edge(0, 0, "next to")])
    assert len(errs) == 2


def test_ids_never_reused_after_delete():
    g = _three_chairs()
    g.apply_corrections([Correction.delete(2)])
    assert g.fuse_detection(det("lamp", cells_at(8.0, 8.0))) == 3


@given(st.lists(st.tuples(st.sampled_from(["merge", "delete", "relabel", "set_edge", "set_room"]),
                          st.integers(0, 5), st.integers(0, 5), st.sampled_from(RELATIONS + (None,))),
                max_size=10))
def test_invariants_hold_after_random_corrections(ops):
    g = SceneGraph(CFG)
    for i in range(5):
        g.fuse_detection(det("chair" if i % 2 else "table", rect(40 + 10 * i, 40, 8, 8 + i),
                             z=(0.0, 0.75) if i % 2 else (0.7, 1.0)))
    g.infer_spatial_relations(set(g.nodes))
    batch = []
    for kind, a, b, rel in ops:
        batch.append({"merge": Correction.merge(a, b), "delete": Correction.delete(a),
                      "relabel": Correction.relabel(a, "bed"), "set_room": Correction.set_room(a, "kitchen"),
                      "set_edge": Correction.set_edge(a, b, rel)}[kind])
    g.apply_corrections(batch)
    g.check_invariants()


# -- neighbours and dumps -----------------------------------------------------

def test_neighbors_within_empty():
    assert SceneGraph(CFG).neighbors_within((0.0, 0.0), 1.0) == []


def test_neighbors_within_filters_and_sorts():
    g = SceneGraph(CFG)
    ids = [g.fuse_detection(det(f"o{i}", cells_at(x, 5.0, half=0))) for i, x in enumerate([8.5, 5.5, 7.0])]
    point = g.nodes[ids[1]].centroid[0] - 0.5, g.nodes[ids[1]].centroid[1]
    # distances are 0.5, 2.0 and 3.5 m from the query point
    got = [n.id for n in g.neighbors_within(point, 2.5)]
    brute = sorted((math.dist(n.centroid, point), n.id) for n in g.nodes.values()
                   if math.dist(n.centroid, point) <= 2.5)
    assert got == [i for _, i in brute] == [ids[1], ids[2]]


def test_neighbors_tie_broken_by_id():
    g = SceneGraph(CFG)
    g.fuse_detection(det("a", cells_at(3.0, 2.0, half=0)))
    g.fuse_detection(det("b", cells_at(1.0, 2.0, half=0)))
    mid = ((g.nodes[0].centroid[0] + g.nodes[1].centroid[0]) / 2, g.nodes[0].centroid[1])
    assert [n.id for n in g.neighbors_within(mid, 5.0)] == [0, 1]


def test_neighbors_within_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        SceneGraph(CFG).neighbors_within((0, 0), 0.0)


def test_json_dump_is_sorted_and_round_trips():
    g = _three_chairs()
    data = json.loads(g.to_json())
    assert [n["id"] for n in data["nodes"]] == [0, 1, 2]
    assert all(e["relation"] in RELATIONS for e in data["edges"])
    assert g.to_json() == g.to_json()
