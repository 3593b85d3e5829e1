import dataclasses
import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cogmap_nav.backends import ReplayBackend
from cogmap_nav.errors import ConfigurationError
from cogmap_nav.fsm_states import CognitiveState
from cogmap_nav.occupancy import Pose
from cogmap_nav.runner import (CSV_COLUMNS, EpisodeConfig, EpisodeResult, compute_metrics, results_csv,
                               run_batch, run_episode, spl_term, state_analysis)
from cogmap_nav.world import generate_world

from test_world import box_world

BS, CS, OT, CV, TC = (CognitiveState.BS, CognitiveState.CS, CognitiveState.OT, CognitiveState.CV,
                      CognitiveState.TC)
CLEAN = EpisodeConfig(noise=(0.0, 0.0, 0.0))


def result(success, p, l, dtg=0.0, goal="bed", steps=100, trace=None):
    return EpisodeResult(success, steps, p, l, dtg, trace or [(0, BS)], Pose(0.0, 0.0), goal=goal)


# -- metrics -------------------------------------------------------------------------

def test_spl_single_formula():
    m = compute_metrics([result(True, 20.0, 10.0)])
    assert m.sr == 100.0 and m.spl == 50.0


def test_spl_path_shorter_than_optimal_is_capped():
    assert spl_term(True, 10.0, 8.0) == 1.0
    assert spl_term(True, 0.0, 0.0) == 1.0
    assert spl_term(False, 10.0, 10.0) == 0.0


def test_all_failures():
    m = compute_metrics([result(False, 5.0, 3.0, dtg=2.0), result(False, 1.0, 4.0, dtg=4.0)])
    assert (m.sr, m.spl, m.dtg) == (0.0, 0.0, 3.0)


HAND = [  # success, p, l, dtg, goal
    (True, 12.5, 10.0, 0.4, "bed"), (False, 30.0, 8.0, 3.2, "bed"), (True, 6.0, 6.0, 0.0, "chair"),
    (True, 9.75, 4.5, 0.9, "chair"), (False, 0.0, 7.0, 7.0, "sofa"), (True, 22.0, 11.0, 0.2, "sofa"),
    (False, 14.25, 2.5, 1.1, "plant"), (True, 3.0, 3.5, 0.6, "plant"), (True, 18.0, 15.0, 0.0, "toilet"),
    (False, 40.0, 9.0, 5.5, "tv_monitor"),
]


def test_ten_episode_fixture_matches_exact_recomputation():
    rs = [result(*row) for row in HAND]
    m = compute_metrics(rs)
    # exact rational recomputation, one formula per column
    F = [tuple(Fraction(v) if isinstance(v, float) else v for v in row) for row in HAND]
    sr = Fraction(100 * sum(1 for s, *_ in F if s), len(F))
    spl = Fraction(100, len(F)) * sum((l / max(p, l)) if s else 0 for s, p, l, _, _ in F)
    dtg = sum(d for *_, d, _ in F) / len(F)
    assert abs(m.sr - float(sr)) < 1e-9
    assert abs(m.spl - float(spl)) < 1e-9
    assert abs(m.dtg - float(dtg)) < 1e-9
    assert m.per_category["bed"].episodes == 2 and m.per_category["bed"].sr == 50.0
    assert abs(m.per_category["chair"].spl - 100 * (1 + 4.5 / 9.75) / 2) < 1e-9
    assert "SR 60.0%" in m.table()


def test_empty_metrics_rejected():
    with pytest.raises(ValueError):
        compute_metrics([])


results_strategy = st.lists(
    st.tuples(st.booleans(), st.floats(0, 100), st.floats(0, 100), st.floats(0, 50),
              st.sampled_from(["bed", "chair", "sofa"])), min_size=1, max_size=30)


@given(results_strategy, st.randoms())
def test_spl_bounded_by_success_and_order_free(rows, rnd):
    rs = [result(*row) for row in rows]
    for r in rs:
        assert 0.0 <= r.spl <= (1.0 if r.success else 0.0)
    m = compute_metrics(rs)
    assert 0.0 <= m.spl <= m.sr + 1e-9 <= 100.0 + 1e-9
    assert m.dtg >= 0.0
    shuffled = rs[:]
    rnd.shuffle(shuffled)
    m2 = compute_metrics(shuffled)
    assert m2.sr == pytest.approx(m.sr) and m2.spl == pytest.approx(m.spl) and m2.dtg == pytest.approx(m.dtg)


def test_csv_columns_and_precision():
    text = results_csv([result(True, 12.5, 10.0, 0.4)])
    header, row = text.strip().split("\n")
    assert tuple(header.split(",")) == CSV_COLUMNS
    assert row.split(",")[5:] == ["12.500", "10.000", "0.800", "0.400"]


# -- state analysis -------------------------------------------------------------------

def test_all_broad_search_has_zero_entropy():
    bins = state_analysis([([(0, BS)], 50), ([(0, BS)], 7)], bins=5)
    assert all(b.ratios[BS] == 1.0 and b.entropy == 0.0 for b in bins)


def test_uniform_bin_has_max_entropy():
    trace = [(0, BS), (1, CS), (2, OT), (3, CV), (4, TC)]
    (b,) = state_analysis([(trace, 5)], bins=1)
    assert b.entropy == pytest.approx(math.log2(5))
    assert all(r == pytest.approx(0.2) for r in b.ratios.values())


def test_two_episode_hand_histogram():
    # episode A, 4 steps: BS BS OT TC ; episode B, 8 steps: BS BS BS BS CS CS CV CV
    a = ([(0, BS), (2, OT), (3, TC)], 4)
    b = ([(0, BS), (4, CS), (6, CV)], 8)
    first, second = state_analysis([a, b], bins=2)
    # first half: A -> BS BS, B -> BS x4
    assert first.ratios[BS] == 1.0 and first.entropy == 0.0
    # second half: A -> OT TC, B -> CS CS CV CV ; 6 samples
    assert second.ratios[OT] == pytest.approx(1 / 6) and second.ratios[TC] == pytest.approx(1 / 6)
    assert second.ratios[CS] == pytest.approx(2 / 6) and second.ratios[CV] == pytest.approx(2 / 6)
    expected = -(2 * (1 / 6) * math.log2(1 / 6) + 2 * (1 / 3) * math.log2(1 / 3))
    assert second.entropy == pytest.approx(expected)


def test_bins_must_be_positive():
    with pytest.raises(ValueError):
        state_analysis([], bins=0)


# -- episodes -----------------------------------------------------------------------------

def near_goal_world():
    return box_world(instances=[(7, "chair", 40, 45, 10, 10)], start=(30, 50))


def test_degenerate_start_stops_immediately():
    r = run_episode(near_goal_world(), CLEAN, backend=ReplayBackend(["Target Confirmation"]))
    assert r.success and r.stopped and r.steps_used == 1
    assert r.optimal_length == 0.0 and r.path_length == 0.0 and r.spl == 1.0
    assert r.state_trace == [(0, TC)] and r.fallbacks == 0


def test_heuristic_confirms_nearby_goal():
    r = run_episode(near_goal_world(), CLEAN)
    assert r.success and r.steps_used <= 30 and r.state_trace[-1][1] is TC
    assert r.final_dtg <= CLEAN.success_radius


def test_unreachable_goal_exhausts_budget_with_flag():
    w = box_world(w=160, instances=[(7, "chair", 120, 45, 10, 10)], inner_wall=(90, 0, 2, 100), start=(20, 50))
    r = run_episode(w, CLEAN)
    assert not r.success and r.steps_used == 500 and not r.stopped
    assert r.optimal_length == math.inf and r.dtg_unreachable
    # straight line to the nearest chair cell centre, minus the success radius
    d = min(math.hypot((x + 0.5) * 0.05 - r.stop_pose.x, (y + 0.5) * 0.05 - r.stop_pose.y)
            for x, y in w.instances[0].cells)
    assert r.final_dtg == pytest.approx(d - 1.0)
    assert compute_metrics([r]).unreachable_dtg == 1


def strip(r):
    d = dataclasses.asdict(r)
    d.pop("frames")
    return d


def test_episode_is_deterministic():
    w = generate_world(13)
    cfg = EpisodeConfig(max_steps=150)
    assert repr(strip(run_episode(w, cfg))) == repr(strip(run_episode(w, cfg)))


@pytest.mark.parametrize("seed", [3, 21])
def test_budget_and_path_accounting(seed):
    cfg = EpisodeConfig(max_steps=40)
    r = run_episode(generate_world(seed), cfg)
    assert r.steps_used <= 40
    forwards = r.path_length / 0.25
    assert abs(forwards - round(forwards)) < 1e-9 and round(forwards) <= r.steps_used
    assert all(a[0] <= b[0] for a, b in zip(r.state_trace, r.state_trace[1:]))
    assert all(0 <= s < r.steps_used for s, _ in r.state_trace)


def test_default_budget_is_500():
    assert EpisodeConfig().max_steps == 500


def test_parallel_batch_equals_sequential():
    cfg = EpisodeConfig(max_steps=60)
    seq = run_batch([1, 2, 3, 4], cfg, workers=1)
    par = run_batch([1, 2, 3, 4], cfg, workers=2)
    assert [repr(strip(r)) for r in seq] == [repr(strip(r)) for r in par]
    assert compute_metrics(seq) == compute_metrics(par)


@pytest.mark.parametrize("kw", [{"max_steps": 0}, {"success_radius": 0.0}, {"decision_cadence": 0},
                                {"noise": (0.1, 2.0, 0.0)}, {"backend": "oracle"},
                                {"enabled_states": frozenset({CS, TC})}, {"correction_reliability": -0.1}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        EpisodeConfig(**kw)
