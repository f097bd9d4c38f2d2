import numpy as np
import pytest
from hypothesis import given, strategies as st

from rowgraph import evaluation as ev

import oracles


def test_rates_reference_case():
    p, r, f, deg = ev.rates(9, 1, 1)
    assert abs(p - 0.9) < 1e-12 and abs(r - 0.9) < 1e-12 and abs(f - 0.9) < 1e-12 and not deg


def test_rates_degenerate_reported_as_zero():
    assert ev.rates(0, 0, 5) == (0.0, 0.0, 0.0, True)
    assert ev.rates(0, 3, 0)[3]


def test_mae_reference_case():
    assert abs(ev.mae([10, 5], [8, 6]) - 1.5) < 1e-12


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_identity(tp, fp, fn):
    p, r, f, _ = ev.rates(tp, fp, fn)
    if p + r:
        assert abs(f - 2 * p * r / (p + r)) < 1e-12


def test_match_prefers_nearer_label():
    m = ev.match_plants([[3.0, 0.0]], [[0.0, 0.0], [6.0, 0.0]])
    assert (m.tp, m.fp, m.fn) == (1, 0, 1)
    m = ev.match_plants([[2.5, 0.0]], [[0.0, 0.0], [6.0, 0.0]])
    assert m.pairs[0][1] == 0


def test_radius_is_strict():
    assert ev.match_plants([[8.0, 0.0]], [[0.0, 0.0]]).tp == 0
    assert ev.match_plants([[7.999, 0.0]], [[0.0, 0.0]]).tp == 1
    assert ev.match_plants([[1.0, 1.0]], [[1.0, 1.0]], radius=0).tp == 1


def test_greedy_can_lose_a_pair():
    pred = [[0.0, 0.0], [8.0, 0.0]]
    lab = [[1.0, 0.0], [-7.0, 0.0]]
    assert ev.match_plants(pred, lab, method="greedy").tp == 1
    assert ev.match_plants(pred, lab).tp == 2


@pytest.mark.parametrize("seed", range(60))
def test_optimal_matching_equals_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(0, 5, size=2)
    pred, lab = rng.uniform(0, 24, (n, 2)), rng.uniform(0, 24, (m, 2))
    res = ev.match_plants(pred, lab)
    assert res.tp == oracles.max_matching(pred.tolist(), lab.tolist(), 8.0)
    assert res.tp + res.fp == n and res.tp + res.fn == m
    assert len({p for p, _, _ in res.pairs}) == res.tp == len({l for _, l, _ in res.pairs})


@given(st.integers(0, 1000))
def test_swapping_sets_swaps_precision_and_recall(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 30, (rng.integers(1, 6), 2)), rng.uniform(0, 30, (rng.integers(1, 6), 2))
    x = ev.plant_metrics([ev.match_plants(a, b)])
    y = ev.plant_metrics([ev.match_plants(b, a)])
    assert x.precision == pytest.approx(y.recall) and x.recall == pytest.approx(y.precision)


def test_plant_metrics_pool_and_per_patch():
    r = ev.plant_metrics([ev.MatchResult(9, 1, 1), ev.MatchResult(1, 1, 0)])
    assert (r.tp, r.fp, r.fn) == (10, 2, 1)
    assert r.mae == pytest.approx((0 + 1) / 2)
    assert r.mean["precision"] == pytest.approx((0.9 + 0.5) / 2)
    with pytest.raises(ValueError):
        ev.plant_metrics([])


def test_line_pixel_counts():
    lab = np.zeros((20, 20), bool)
    lab[10, :] = True
    pred = np.zeros((20, 20), bool)
    pred[14, :] = True  # 4 px away: all within 5
    assert ev.line_pixel_counts(pred, lab) == (20, 0, 0)
    pred2 = np.zeros((20, 20), bool)
    pred2[15, :10] = True  # 5 px away: outside the strict radius
    assert ev.line_pixel_counts(pred2, lab) == (0, 10, 20)
    with pytest.raises(ValueError):
        ev.line_pixel_counts(pred, lab[:5])


def test_line_pixel_counts_empty_masks():
    z = np.zeros((4, 4), bool)
    assert ev.line_pixel_counts(z, z) == (0, 0, 0)
    rep = ev.line_metrics(z, z)
    assert rep.degenerate and rep.f1 == 0.0


def test_ablation_table_structure():
    rep = ev.line_metrics(np.eye(8, dtype=bool), np.eye(8, dtype=bool))
    t = ev.run_ablation("features", {g: rep for g in ev.GRIDS["features"]})
    lines = t.to_csv().strip().splitlines()
    assert len(lines) == 5 and lines[1].startswith("visual,1")
    assert t.row("all")["reference"]["f1"] == 95.1
    partial = ev.run_ablation("points", {16: rep})
    assert [r["present"] for r in partial.rows] == [False, False, True]
    with pytest.raises(ValueError):
        ev.run_ablation("bogus", {})
