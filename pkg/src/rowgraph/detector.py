"""scikit-learn style estimator wrapping the full plantation-line pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import diffkernel as dk
from . import linegraph as lg
from .evaluation import line_metrics, match_plants, plant_metrics
from .fieldgen import PlantationScene, ground_truth
from .netkem import (BackboneConfig, EcmConfig, EcmHead, EcmTrainConfig, KemConfig, KemModel,
                     TrainConfig, train_ecm, train_kem)

log = logging.getLogger(__name__)


def check_images(X) -> np.ndarray:
    """Validate a stack of RGB images: [N, 3, H, W] (or one [3, H, W]), finite, H and W divisible by 4."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped [N, 3, H, W], got {X.shape}")
    if X.shape[2] % 4 or X.shape[3] % 4:
        raise ValueError(f"image extents must be divisible by 4, got {X.shape[2]}x{X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_scenes(y, n: int) -> list:
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {len(y)} scenes for {n} images")
    for s in y:
        if not isinstance(s, PlantationScene):
            raise TypeError(f"labels must be PlantationScene objects, got {type(s).__name__}")
    return y


@dataclass
class Detection:
    graph: lg.PlantGraph
    lines: lg.DetectedLines
    mask: np.ndarray  # rasterized accepted edges, full resolution
    gate: str = "all"

    @property
    def positions(self) -> np.ndarray:
        return self.graph.positions

    def with_gate(self, gate: str) -> "Detection":
        """Re-apply a different probability gate to the stored edge scores."""
        g = self.graph
        accepted = lg.classify_edges(g.scores, gate) if len(g.edges) else np.zeros(0, dtype=bool)
        graph = lg.PlantGraph(g.vertices, g.edges, g.scores, accepted, g.sample_points, g.tau, g.delta)
        H, W = self.mask.shape
        mask = lg.rasterize_edges(graph.positions, graph.edges[accepted], H, W)
        return Detection(graph, lg.assemble_lines(graph), mask, gate)

    def to_dict(self) -> dict:
        g = self.graph
        edges = []
        for k, (i, j) in enumerate(g.edges):
            s = g.scores[k]
            edges.append({"i": int(i), "j": int(j), "p_vis": float(s[0]), "p_vec": float(s[1]),
                          "p_pix": float(s[2]), "accepted": bool(g.accepted[k])})
        return {
            "vertices": [{"x": v.x, "y": v.y, "conf": v.confidence} for v in g.vertices],
            "edges": edges,
            "lines": [list(map(int, grp)) for grp in self.lines.groups],
            "gate": self.gate,
            "sample_points": g.sample_points,
            "tau": g.tau,
            "delta": g.delta,
        }


class PlantationLineDetector(BaseEstimator):
    """Detect plants and plantation lines in RGB patches.

    ``fit`` trains the backbone and knowledge-estimation stages on the map
    regression losses, then trains the edge head with those weights frozen.
    ``predict`` returns one :class:`Detection` per image.
    """

    def __init__(self, stages=2, width_scale=1.0, sample_points=16, tau=0.15, delta=1.0,
                 learning_rate=0.001, momentum=0.9, batch_size=4, epochs_kem=100, epochs_ecm=50,
                 neg_ratio=3.0, max_positive_per_scene=48, grad_clip=30.0, shared_trunk=False,
                 gate="all", random_state=0):
        self.stages = stages
        self.width_scale = width_scale
        self.sample_points = sample_points
        self.tau = tau
        self.delta = delta
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs_kem = epochs_kem
        self.epochs_ecm = epochs_ecm
        self.neg_ratio = neg_ratio
        self.max_positive_per_scene = max_positive_per_scene
        self.grad_clip = grad_clip
        self.shared_trunk = shared_trunk
        self.gate = gate
        self.random_state = random_state

    # ------------------------------------------------------------ building

    def _sgd(self):
        return dk.SgdConfig(self.learning_rate, self.momentum, self.batch_size)

    def _new_kem(self):
        return KemModel(BackboneConfig(width_scale=self.width_scale),
                        KemConfig(stages=self.stages, width_scale=self.width_scale,
                                  shared_trunk=self.shared_trunk),
                        seed=self.random_state)

    def _new_head(self):
        rng = np.random.default_rng([self.random_state, 11])
        cfg = EcmConfig(sample_points=self.sample_points, width_scale=self.width_scale)
        return EcmHead(cfg, self.kem_.backbone.channels, rng)

    def _check_fitted(self, need_head=True):
        if not hasattr(self, "kem_") or (need_head and not hasattr(self, "ecm_")):
            raise NotFittedError("PlantationLineDetector is not fitted yet")

    # ------------------------------------------------------------- fitting

    def fit(self, X, y, eval_set=None):
        self.fit_kem(X, y, eval_set)
        return self.fit_ecm(X, y, eval_set)

    def fit_kem(self, X, y, eval_set=None):
        X = check_images(X)
        y = check_scenes(y, len(X))
        train = [(x, ground_truth(s, self.stages)) for x, s in zip(X, y)]
        val = []
        if eval_set is not None:
            Xv = check_images(eval_set[0])
            yv = check_scenes(eval_set[1], len(Xv))
            val = [(x, ground_truth(s, self.stages)) for x, s in zip(Xv, yv)]
        self.kem_ = self._new_kem()
        cfg = TrainConfig(epochs=self.epochs_kem, sgd=self._sgd(), seed=self.random_state,
                          grad_clip=self.grad_clip)
        self.kem_history_ = train_kem(self.kem_, train, val, cfg)
        if hasattr(self, "ecm_"):
            del self.ecm_
        return self

    def fit_ecm(self, X, y, eval_set=None):
        """Train only the edge head; the fitted backbone/KEM stay frozen."""
        self._check_fitted(need_head=False)
        X = check_images(X)
        y = check_scenes(y, len(X))
        Xv, yv = (), ()
        if eval_set is not None:
            Xv = check_images(eval_set[0])
            yv = check_scenes(eval_set[1], len(Xv))
        self.ecm_ = self._new_head()
        cfg = EcmTrainConfig(epochs=self.epochs_ecm, sgd=self._sgd(), seed=self.random_state,
                             neg_ratio=self.neg_ratio, max_positive_per_scene=self.max_positive_per_scene,
                             grad_clip=self.grad_clip)
        self.ecm_history_ = train_ecm(self.kem_, self.ecm_, y, list(X), cfg, yv, list(Xv))
        return self

    # ----------------------------------------------------------- inference

    def transform(self, X, batch_size=8):
        """Feature maps and final-stage estimates: list of dicts with keys
        ``features``, ``plant``, ``line``, ``vectors`` (all half resolution)."""
        self._check_fitted(need_head=False)
        X = check_images(X)
        out = []
        with dk.no_grad():
            for i in range(0, len(X), batch_size):
                feats, stages = self.kem_(X[i:i + batch_size])
                last = stages[-1]
                for b in range(feats.shape[0]):
                    out.append({"features": feats.data[b], "plant": last.plant.data[b, 0],
                                "line": last.line.data[b, 0], "vectors": last.vectors.data[b],
                                "stage_plants": [s.plant.data[b, 0] for s in stages]})
        return out

    def detect_plants(self, X) -> list:
        return [lg.detect_peaks(m["plant"], self.tau, self.delta) for m in self.transform(X)]

    def predict(self, X) -> list:
        self._check_fitted()
        X = check_images(X)
        H, W = X.shape[2:]
        results = []
        for maps in self.transform(X):
            vertices = lg.detect_peaks(maps["plant"], self.tau, self.delta)
            graph = lg.build_complete_graph(vertices, self.sample_points, self.tau, self.delta)
            lg.score_edges(graph, maps["features"], maps["line"], maps["vectors"], self.ecm_)
            graph.accepted = lg.classify_edges(graph.scores, self.gate) if len(graph.edges) \
                else np.zeros(0, dtype=bool)
            mask = lg.rasterize_edges(graph.positions, graph.edges[graph.accepted], H, W)
            results.append(Detection(graph, lg.assemble_lines(graph), mask, self.gate))
        return results

    def score(self, X, y):
        """Pooled line-pixel F1 against the labelled scenes."""
        X = check_images(X)
        y = check_scenes(y, len(X))
        dets = self.predict(X)
        return evaluate_detections(dets, y)["lines"].f1

    # -------------------------------------------------------------- weights

    def kem_header(self) -> dict:
        return {"kind": "kem", "stages": self.stages, "width_scale": self.width_scale,
                "shared_trunk": int(bool(self.shared_trunk)), "tau": self.tau, "delta": self.delta}

    def ecm_header(self) -> dict:
        return {"kind": "ecm", "sample_points": self.sample_points, "width_scale": self.width_scale}

    def save_kem(self, path):
        self._check_fitted(need_head=False)
        dk.save_weights(path, self.kem_.params(), self.kem_header())

    def save_ecm(self, path):
        self._check_fitted()
        dk.save_weights(path, self.ecm_.params(), self.ecm_header())

    def load_kem(self, path):
        _, arrays = dk.load_weights(path)
        self.kem_ = self._new_kem()
        self.kem_.load_state(arrays)
        return self

    def load_ecm(self, path):
        self._check_fitted(need_head=False)
        _, arrays = dk.load_weights(path)
        self.ecm_ = self._new_head()
        for p in self.ecm_.params():
            if p.name not in arrays or arrays[p.name].shape != p.data.shape:
                raise ValueError(f"edge head weights do not fit parameter {p.name}")
            p.data[...] = arrays[p.name]
        return self


def evaluate_detections(detections, scenes, plant_radius=8.0, line_radius=5.0) -> dict:
    """Plant metrics (radius 8 px) and line-pixel metrics (radius 5 px) over patches."""
    matches = [match_plants(d.positions, s.plants, plant_radius) for d, s in zip(detections, scenes)]
    masks = [lg.line_mask(s, *d.mask.shape) for d, s in zip(detections, scenes)]
    return {"plants": plant_metrics(matches),
            "lines": line_metrics([d.mask for d in detections], masks, line_radius)}


def evaluate_plants(vertex_lists, scenes, radius=8.0):
    matches = [match_plants(np.array([[v.x, v.y] for v in vs]).reshape(-1, 2), s.plants, radius)
               for vs, s in zip(vertex_lists, scenes)]
    return plant_metrics(matches)
