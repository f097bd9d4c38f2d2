import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rowgraph import linegraph as lg
from rowgraph.fieldgen import PlantationLine, PlantationScene

import oracles


def gaussian(H, W, centres, sigma=2.0):
    yy, xx = np.mgrid[0:H, 0:W]
    m = np.zeros((H, W))
    for x, y in centres:
        m = np.maximum(m, np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2)))
    return m


def as_tuples(vs):
    return [(v.x, v.y, v.confidence) for v in vs]


def test_single_gaussian_gives_one_vertex_at_double():
    vs = lg.detect_peaks(gaussian(20, 20, [(7, 5)]))
    assert [(v.x, v.y) for v in vs] == [(14.0, 10.0)]


def test_uniform_map_has_no_peaks():
    assert lg.detect_peaks(np.full((8, 8), 0.9)) == []


def test_peaks_need_strictly_more_than_tau():
    m = np.zeros((5, 5))
    m[2, 2] = 0.15
    assert lg.detect_peaks(m, tau=0.15) == []
    m[2, 2] = 0.1500001
    assert len(lg.detect_peaks(m, tau=0.15)) == 1


def test_two_gaussians_match_scan_oracle():
    m = gaussian(40, 40, [(5, 5), (25, 25)])
    assert as_tuples(lg.detect_peaks(m)) == oracles.peaks(m, 0.15, 1.0)


def test_delta_suppresses_weaker_neighbour():
    m = np.zeros((6, 6))
    m[2, 2], m[3, 3] = 0.9, 0.8  # diagonal: both strict 4-neighbour maxima, 2*sqrt(2) px apart
    assert len(lg.detect_peaks(m, delta=1.0)) == 2
    vs = lg.detect_peaks(m, delta=3.0)
    assert [(v.x, v.y) for v in vs] == [(4.0, 4.0)]


@given(st.integers(0, 10_000))
def test_peaks_random_maps_equal_oracle(seed):
    rng = np.random.default_rng(seed)
    m = np.round(rng.uniform(size=(rng.integers(1, 12), rng.integers(1, 12))), 1)
    delta = float(rng.choice([1.0, 2.0, 3.0, 5.0]))
    assert as_tuples(lg.detect_peaks(m, 0.15, delta)) == oracles.peaks(m, 0.15, delta)


@pytest.mark.parametrize("n,e", [(0, 0), (1, 0), (3, 3), (10, 45)])
def test_complete_graph_sizes(n, e):
    g = lg.build_complete_graph([lg.Vertex(float(k), 0.0, 1.0) for k in range(n)])
    assert len(g.edges) == e
    assert all(i < j for i, j in g.edges)


def test_sample_points_closed_form():
    pts = lg.sample_edge_points((0, 0), (0, 17), 16)
    np.testing.assert_allclose(pts[:, 1], np.arange(1, 17))
    np.testing.assert_allclose(lg.sample_edge_points((2, 4), (6, 8), 1), [[4, 6]])
    np.testing.assert_allclose(lg.sample_edge_points((6, 8), (2, 4), 5),
                               lg.sample_edge_points((2, 4), (6, 8), 5)[::-1])
    with pytest.raises(ValueError):
        lg.sample_edge_points((1, 1), (1, 1))


def test_sample_map_rules():
    m = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert lg.sample_map(m, (2, 0)) == 1.0
    assert lg.sample_map(m, (1, 0)) == 0.5
    assert lg.sample_map(m, (100, -5)) == 1.0  # clamped to the border
    assert lg.sample_map(np.full((3, 3), 0.4), (1.3, 2.7)) == pytest.approx(0.4)


def test_vector_score_examples():
    field = np.zeros((2, 10, 10))
    field[0] = 1.0
    assert lg.displacement_probability((2, 4), (14, 4), field) == pytest.approx(1.0, abs=1e-6)
    assert lg.displacement_probability((14, 4), (2, 4), field) == pytest.approx(1.0, abs=1e-6)
    assert lg.displacement_probability((4, 2), (4, 14), field) == pytest.approx(0.0, abs=1e-12)
    assert lg.displacement_probability((4, 2), (4, 14), np.zeros((2, 10, 10))) == 0.0


def test_pixel_score_examples():
    assert lg.pixel_probability((0, 0), (10, 10), np.ones((8, 8))) == pytest.approx(1.0)
    assert lg.pixel_probability((0, 0), (10, 10), np.zeros((8, 8))) == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_scores_equal_brute_force(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(3, 12, size=2)
    field = rng.normal(size=(2, H, W))
    line = rng.uniform(-0.3, 1.3, size=(H, W))
    a = tuple(rng.uniform(0, 2 * W, 1)) + tuple(rng.uniform(0, 2 * H, 1))
    b = tuple(rng.uniform(0, 2 * W, 1)) + tuple(rng.uniform(0, 2 * H, 1))
    L = int(rng.integers(1, 20))
    assert abs(lg.displacement_probability(a, b, field, L) - oracles.vector_score(a, b, field, L)) < 1e-9
    assert abs(lg.pixel_probability(a, b, line, L) - oracles.pixel_score(a, b, line, L)) < 1e-9


def test_visual_score_zero_head_is_half():
    from rowgraph.netkem import EcmConfig, EcmHead
    head = EcmHead(EcmConfig(sample_points=4, width_scale=0.0625), 8, np.random.default_rng(0))
    for p in head.params():
        p.data[...] = 0
    f = np.random.default_rng(1).uniform(size=(8, 6, 6))
    assert lg.visual_probability((0, 0), (10, 6), f, head, 4) == 0.5


@pytest.mark.parametrize("scores", list(itertools.product([0.4, 0.5, 0.6], repeat=3)))
def test_gate_truth_table(scores):
    assert lg.classify_edge(scores) == all(s > 0.5 for s in scores)


def test_gate_subsets():
    s = np.array([[0.9, 0.1, 0.9], [0.9, 0.9, 0.1]])
    assert lg.classify_edges(s, "visual").tolist() == [True, True]
    assert lg.classify_edges(s, "visual+vector").tolist() == [False, True]
    assert lg.classify_edges(s, "visual+line").tolist() == [True, False]
    assert lg.classify_edges(s, "all").tolist() == [False, False]


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_gate_is_monotone(scores, k, bump):
    raised = list(scores)
    raised[k] = min(1.0, raised[k] + bump)
    assert lg.classify_edge(raised) >= lg.classify_edge(scores)


def _graph(n, accepted_pairs):
    g = lg.build_complete_graph([lg.Vertex(float(4 * k), 0.0, 1.0) for k in range(n)])
    g.accepted = np.array([tuple(e) in accepted_pairs for e in g.edges.tolist()])
    return g


def test_assemble_lines_components():
    assert lg.assemble_lines(_graph(3, {(0, 1), (1, 2)})).groups == [[0, 1, 2]]
    assert lg.assemble_lines(_graph(3, set())).groups == []
    assert lg.assemble_lines(_graph(4, {(0, 1), (2, 3)})).groups == [[0, 1], [2, 3]]


def test_every_accepted_edge_in_one_component(rng):
    n = 9
    pairs = {tuple(sorted(rng.choice(n, 2, replace=False).tolist())) for _ in range(6)}
    lines = lg.assemble_lines(_graph(n, pairs))
    flat = [tuple(e) for es in lines.edges for e in es]
    assert sorted(flat) == sorted(pairs)


def test_bresenham():
    assert lg.bresenham(0, 0, 3, 3) == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert lg.bresenham(0, 0, 0, 0) == [(0, 0)]
    assert len(lg.bresenham(0, 0, 5, 2)) == 6


@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
def test_bresenham_connected_and_symmetric_endpoints(x0, y0, x1, y1):
    pts = lg.bresenham(x0, y0, x1, y1)
    assert pts[0] == (x0, y0) and pts[-1] == (x1, y1)
    assert len(pts) == max(abs(x1 - x0), abs(y1 - y0)) + 1
    assert all(max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1 for a, b in zip(pts, pts[1:]))


def test_rasterize_edges_clips():
    m = lg.rasterize_edges(np.array([[-4.0, 2.0], [20.0, 2.0]]), [(0, 1)], 5, 8)
    assert m[2].all() and m.sum() == 8


def test_line_mask_traces_segments():
    s = PlantationScene(16, 16, [PlantationLine(0, [[1, 3], [9, 3], [9, 11]])])
    m = lg.line_mask(s)
    assert m[3, 1:10].all() and m[3:12, 9].all() and m.sum() == 17


def test_score_edges_without_head_uses_half():
    g = lg.build_complete_graph([lg.Vertex(0, 0, 1), lg.Vertex(8, 0, 1)])
    field = np.zeros((2, 4, 6))
    field[0] = 1
    lg.score_edges(g, None, np.ones((4, 6)), field)
    np.testing.assert_allclose(g.scores, [[0.5, 1.0, 1.0]])
