"""Plant graph construction and edge scoring.

Vertices live in full-resolution image coordinates; every KEM map is
sampled at halved coordinates with bilinear interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

TAU = 0.15
DELTA = 1.0
SAMPLE_POINTS = 16
GATE_THRESHOLD = 0.5

GATES = {
    "visual": ("visual",),
    "visual+vector": ("visual", "vector"),
    "visual+line": ("visual", "pixel"),
    "all": ("visual", "vector", "pixel"),
}
_SCORE_INDEX = {"visual": 0, "vector": 1, "pixel": 2}


@dataclass
class Vertex:
    x: float
    y: float
    confidence: float

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass
class PlantGraph:
    vertices: list
    edges: np.ndarray  # [E, 2], i < j, canonical order
    scores: np.ndarray = None  # [E, 3]: visual, vector, pixel
    accepted: np.ndarray = None  # [E] bool
    sample_points: int = SAMPLE_POINTS
    tau: float = TAU
    delta: float = DELTA

    @property
    def positions(self) -> np.ndarray:
        return np.array([[v.x, v.y] for v in self.vertices]).reshape(-1, 2)


@dataclass
class DetectedLines:
    groups: list = field(default_factory=list)  # sorted vertex indices per line
    edges: list = field(default_factory=list)  # accepted edges per line
    polylines: list = field(default_factory=list)  # vertex indices in traversal order


# ------------------------------------------------------------------- peaks

def detect_peaks(plant_map: np.ndarray, tau: float = TAU, delta: float = DELTA) -> list:
    """Strict 4-neighbourhood maxima above ``tau``, thinned greedily by ``delta``.

    ``delta`` is measured in image pixels, after the x2 coordinate scaling.
    """
    m = np.asarray(plant_map, dtype=np.float64)
    pad = np.pad(m, 1, constant_values=-np.inf)
    c = pad[1:-1, 1:-1]
    is_max = ((c > pad[:-2, 1:-1]) & (c > pad[2:, 1:-1]) & (c > pad[1:-1, :-2]) & (c > pad[1:-1, 2:])
              & (c > tau))
    rows, cols = np.nonzero(is_max)
    vals = m[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    kept = []
    for k in order:
        p = np.array([2.0 * cols[k], 2.0 * rows[k]])
        if any(np.hypot(*(p - q.position)) <= delta for q in kept):
            continue
        kept.append(Vertex(float(p[0]), float(p[1]), float(vals[k])))
    return kept


def build_complete_graph(vertices, sample_points=SAMPLE_POINTS, tau=TAU, delta=DELTA) -> PlantGraph:
    n = len(vertices)
    i, j = np.triu_indices(n, k=1)
    return PlantGraph(list(vertices), np.stack([i, j], axis=1).astype(np.int64), sample_points=sample_points,
                      tau=tau, delta=delta)


# ---------------------------------------------------------------- sampling

def sample_edge_points(v_i, v_j, L: int = SAMPLE_POINTS) -> np.ndarray:
    """L interior, equidistant points strictly between the two endpoints."""
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    if L < 1:
        raise ValueError("need at least one sample point")
    if np.array_equal(v_i, v_j):
        raise ValueError("edge endpoints coincide")
    t = np.arange(1, L + 1) / (L + 1)
    return v_i + t[:, None] * (v_j - v_i)


def sample_edge_points_batch(p_i: np.ndarray, p_j: np.ndarray, L: int) -> np.ndarray:
    """[E, L, 2] sample points for E edges."""
    t = np.arange(1, L + 1) / (L + 1)
    return p_i[:, None, :] + t[None, :, None] * (p_j - p_i)[:, None, :]


def sample_map_batch(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a [H, W] or [C, H, W] map at image-space ``points`` [..., 2].

    Returns [...] for a 2-D map and [..., C, n] style [E, C, L] for points of
    shape [E, L, 2] with a 3-D map.
    """
    values = np.asarray(values)
    squeeze = values.ndim == 2
    v = values[None] if squeeze else values
    _, H, W = v.shape
    x = np.clip(points[..., 0] / 2.0, 0.0, W - 1)
    y = np.clip(points[..., 1] / 2.0, 0.0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    out = (v[:, y0, x0] * ((1 - fx) * (1 - fy)) + v[:, y0, x1] * (fx * (1 - fy))
           + v[:, y1, x0] * ((1 - fx) * fy) + v[:, y1, x1] * (fx * fy))
    if squeeze:
        return out[0]
    # [C, ...] -> [..., C, last]
    if points.ndim == 3:
        return np.moveaxis(out, 0, 1)
    return np.moveaxis(out, 0, -1)


def sample_map(values: np.ndarray, point) -> np.ndarray | float:
    """Value(s) of a half-resolution map at one image-space point."""
    pts = np.asarray(point, dtype=np.float64).reshape(1, 2)
    out = sample_map_batch(values, pts)
    return float(out[0]) if np.ndim(values) == 2 else out[0]


# ------------------------------------------------------------------ scores

def _vector_scores(field: np.ndarray, p_i: np.ndarray, p_j: np.ndarray, L: int) -> np.ndarray:
    pts = sample_edge_points_batch(p_i, p_j, L)
    vx = sample_map_batch(field[0], pts)
    vy = sample_map_batch(field[1], pts)
    d = p_j - p_i
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    forward = (vx * u[:, None, 0] + vy * u[:, None, 1]).mean(axis=1)
    # reversed orientation samples the same points with the opposite direction
    backward = -forward
    return np.clip(np.maximum(forward, backward), 0.0, 1.0)


def _pixel_scores(line_map: np.ndarray, p_i: np.ndarray, p_j: np.ndarray, L: int) -> np.ndarray:
    pts = sample_edge_points_batch(p_i, p_j, L)
    return np.clip(sample_map_batch(line_map, pts), 0.0, 1.0).mean(axis=1)


def displacement_probability(v_i, v_j, vector_field: np.ndarray, L: int = SAMPLE_POINTS) -> float:
    """Mean alignment of the sampled vectors with the edge, best orientation, clamped to [0, 1]."""
    sample_edge_points(v_i, v_j, L)
    return float(_vector_scores(vector_field, np.atleast_2d(np.asarray(v_i, float)),
                                np.atleast_2d(np.asarray(v_j, float)), L)[0])


def pixel_probability(v_i, v_j, line_map: np.ndarray, L: int = SAMPLE_POINTS) -> float:
    sample_edge_points(v_i, v_j, L)
    return float(_pixel_scores(line_map, np.atleast_2d(np.asarray(v_i, float)),
                               np.atleast_2d(np.asarray(v_j, float)), L)[0])


def visual_probability(v_i, v_j, feature_map: np.ndarray, head, L: int = SAMPLE_POINTS) -> float:
    from .diffkernel import Tensor, no_grad

    pts = sample_edge_points(v_i, v_j, L)
    feats = np.clip(sample_map_batch(feature_map, pts[None]), 0.0, None)[0]
    with no_grad():
        out = head(Tensor(feats.astype(head.dense_w.data.dtype)))
    return float(out.data.reshape(-1)[0])


def score_edges(graph: PlantGraph, feature_map, line_map, vector_field, head=None,
                chunk: int = 4096) -> PlantGraph:
    """Fill ``graph.scores`` for every edge; the visual score is 0.5 without a head."""
    from .diffkernel import Tensor, no_grad

    E = len(graph.edges)
    L = graph.sample_points
    scores = np.zeros((E, 3))
    if E:
        pos = graph.positions
        p_i, p_j = pos[graph.edges[:, 0]], pos[graph.edges[:, 1]]
        scores[:, 1] = _vector_scores(vector_field, p_i, p_j, L)
        scores[:, 2] = _pixel_scores(line_map, p_i, p_j, L)
        if head is None:
            scores[:, 0] = 0.5
        else:
            dtype = head.dense_w.data.dtype
            with no_grad():
                for s in range(0, E, chunk):
                    pts = sample_edge_points_batch(p_i[s:s + chunk], p_j[s:s + chunk], L)
                    feats = np.clip(sample_map_batch(feature_map, pts), 0.0, None).astype(dtype)
                    scores[s:s + chunk, 0] = head(Tensor(feats)).data[:, 0]
    graph.scores = scores
    return graph


def classify_edge(scores, gate=("visual", "vector", "pixel")) -> bool:
    """Accept iff every gated probability is strictly greater than 0.5."""
    return all(scores[_SCORE_INDEX[g]] > GATE_THRESHOLD for g in gate)


def classify_edges(scores: np.ndarray, gate="all") -> np.ndarray:
    names = GATES[gate] if isinstance(gate, str) else tuple(gate)
    cols = [_SCORE_INDEX[g] for g in names]
    scores = np.asarray(scores).reshape(-1, 3)
    return np.all(scores[:, cols] > GATE_THRESHOLD, axis=1)


def assemble_lines(graph: PlantGraph) -> DetectedLines:
    """Connected components of the accepted-edge graph; isolated vertices form no line."""
    n = len(graph.vertices)
    acc = graph.edges[np.asarray(graph.accepted, dtype=bool)] if len(graph.edges) else np.zeros((0, 2), int)
    out = DetectedLines()
    if not len(acc):
        return out
    adj = coo_matrix((np.ones(len(acc)), (acc[:, 0], acc[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    touched = np.zeros(n, dtype=bool)
    touched[acc.ravel()] = True
    # order components by their smallest vertex index
    seen = {}
    for v in range(n):
        if touched[v] and labels[v] not in seen:
            seen[labels[v]] = len(seen)
    pos = graph.positions
    for lab in seen:
        members = np.flatnonzero((labels == lab) & touched)
        edges = acc[labels[acc[:, 0]] == lab]
        out.groups.append(members.tolist())
        out.edges.append(edges.tolist())
        out.polylines.append(_traversal(pos[members], members).tolist())
    return out


def _traversal(points, members):
    if len(members) < 3:
        return np.asarray(members)
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return np.asarray(members)[np.argsort(centered @ vt[0], kind="stable")]


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list:
    """Integer points of the segment, endpoints included."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_segments(segments, height: int, width: int) -> np.ndarray:
    """Union of Bresenham traces of [(x0, y0, x1, y1), ...] as a bool [H, W] mask."""
    mask = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in segments:
        for x, y in bresenham(int(round(x0)), int(round(y0)), int(round(x1)), int(round(y1))):
            if 0 <= x < width and 0 <= y < height:
                mask[y, x] = True
    return mask


def rasterize_edges(positions: np.ndarray, edges, height: int, width: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    segs = [(*positions[i], *positions[j]) for i, j in np.asarray(edges, dtype=np.int64).reshape(-1, 2)]
    return rasterize_segments(segs, height, width)


def line_mask(scene, height=None, width=None) -> np.ndarray:
    """Rasterized labelled lines: every consecutive-plant segment of every line."""
    height = scene.height if height is None else height
    width = scene.width if width is None else width
    segs = [(*a, *b) for a, b in scene.segments()]
    return rasterize_segments(segs, height, width)
