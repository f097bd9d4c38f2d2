"""Plant and line-pixel detection metrics, plus the ablation tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.optimize import linear_sum_assignment

PLANT_RADIUS = 8.0
LINE_RADIUS = 5.0


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (pred index, label index, distance)


def _within(d, radius):
    # strict "less than"; exact coincidence always counts, so radius 0 means identity
    return (d < radius) | (d == 0)


def match_plants(predicted, labeled, radius: float = PLANT_RADIUS, method: str = "optimal") -> MatchResult:
    """One-to-one matching of predictions to labels closer than ``radius``.

    ``optimal`` finds the most pairs and, among those, the smallest total
    distance. ``greedy`` takes candidate pairs in ascending distance, skipping
    used items; it can miss pairs the optimal matching finds.
    """
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    lab = np.asarray(labeled, dtype=np.float64).reshape(-1, 2)
    if not len(pred) or not len(lab):
        return MatchResult(0, len(pred), len(lab))
    d = np.sqrt(((pred[:, None, :] - lab[None, :, :]) ** 2).sum(-1))
    ok = _within(d, radius)
    if method == "greedy":
        pairs = _greedy_pairs(d, ok)
    elif method == "optimal":
        # any valid pair is cheaper than trading it for a missing one
        penalty = (radius + 1.0) * (min(len(pred), len(lab)) + 1)
        rows, cols = linear_sum_assignment(np.where(ok, d, penalty))
        pairs = [(int(r), int(c), float(d[r, c])) for r, c in zip(rows, cols) if ok[r, c]]
    else:
        raise ValueError(f"unknown matching method {method!r}")
    tp = len(pairs)
    return MatchResult(tp, len(pred) - tp, len(lab) - tp, pairs)


def _greedy_pairs(d, ok):
    r, c = np.nonzero(ok)
    order = np.lexsort((c, r, d[r, c]))
    used_p, used_l, pairs = set(), set(), []
    for k in order:
        i, j = int(r[k]), int(c[k])
        if i not in used_p and j not in used_l:
            used_p.add(i)
            used_l.add(j)
            pairs.append((i, j, float(d[i, j])))
    return pairs


def rates(tp, fp, fn):
    """(precision, recall, f1, degenerate); 0/0 rates are reported as 0 and flagged."""
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, degenerate


def _mean_sd(values):
    v = np.asarray(values, dtype=np.float64)
    if not len(v):
        return None, None
    return float(v.mean()), float(v.std())


@dataclass
class MetricsReport:
    kind: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    mae: float | None = None
    per_patch: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "aggregate": {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                          "tp": self.tp, "fp": self.fp, "fn": self.fn, "mae": self.mae,
                          "degenerate": self.degenerate},
            "per_patch_mean": self.mean,
            "per_patch_sd": self.sd,
            "per_patch": self.per_patch,
        }


def _summarize(kind, rows, mae=None):
    tp = sum(r["tp"] for r in rows)
    fp = sum(r["fp"] for r in rows)
    fn = sum(r["fn"] for r in rows)
    p, r, f, deg = rates(tp, fp, fn)
    mean, sd = {}, {}
    for key in ("precision", "recall", "f1"):
        vals = [row[key] for row in rows if not row["degenerate"]]
        mean[key], sd[key] = _mean_sd(vals)
    return MetricsReport(kind, p, r, f, tp, fp, fn, mae, rows, mean, sd, deg)


def plant_metrics(matches, labeled_counts=None, predicted_counts=None) -> MetricsReport:
    """Pooled and per-patch precision/recall/F1, and MAE of per-patch plant counts."""
    matches = list(matches)
    if not matches:
        raise ValueError("plant_metrics needs at least one patch")
    rows = []
    errs = []
    for k, m in enumerate(matches):
        n_lab = m.tp + m.fn if labeled_counts is None else labeled_counts[k]
        n_pred = m.tp + m.fp if predicted_counts is None else predicted_counts[k]
        p, r, f, deg = rates(m.tp, m.fp, m.fn)
        rows.append({"patch": k, "tp": m.tp, "fp": m.fp, "fn": m.fn, "labeled": int(n_lab),
                     "detected": int(n_pred), "precision": p, "recall": r, "f1": f, "degenerate": deg})
        errs.append(abs(n_lab - n_pred))
    return _summarize("plants", rows, float(np.mean(errs)))


def mae(labeled_counts, predicted_counts) -> float:
    a = np.asarray(labeled_counts, dtype=np.float64)
    b = np.asarray(predicted_counts, dtype=np.float64)
    return float(np.mean(np.abs(a - b)))


def line_pixel_counts(predicted: np.ndarray, labeled: np.ndarray, radius: float = LINE_RADIUS):
    """(tp, fp, fn): predicted pixels near a label, the rest, and labels far from every prediction."""
    predicted = np.asarray(predicted, dtype=bool)
    labeled = np.asarray(labeled, dtype=bool)
    if predicted.shape != labeled.shape:
        raise ValueError(f"mask shapes differ: {predicted.shape} vs {labeled.shape}")
    if labeled.any():
        d_lab = distance_transform_edt(~labeled)
        near = _within(d_lab, radius) & predicted
        tp = int(near.sum())
    else:
        tp = 0
    fp = int(predicted.sum()) - tp
    if predicted.any():
        d_pred = distance_transform_edt(~predicted)
        fn = int((labeled & ~_within(d_pred, radius)).sum())
    else:
        fn = int(labeled.sum())
    return tp, fp, fn


def line_metrics(predicted_masks, labeled_masks, radius: float = LINE_RADIUS) -> MetricsReport:
    """Line-pixel metrics over one mask pair or matching lists of masks."""
    if isinstance(predicted_masks, np.ndarray) and predicted_masks.ndim == 2:
        predicted_masks, labeled_masks = [predicted_masks], [labeled_masks]
    rows = []
    for k, (pm, lm) in enumerate(zip(predicted_masks, labeled_masks)):
        tp, fp, fn = line_pixel_counts(pm, lm, radius)
        p, r, f, deg = rates(tp, fp, fn)
        rows.append({"patch": k, "tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r, "f1": f,
                     "degenerate": deg})
    if not rows:
        raise ValueError("line_metrics needs at least one mask pair")
    return _summarize("lines", rows)


# ----------------------------------------------------------------- ablation

# reference values (percent) on real UAV imagery, shown next to the reproduced rows
REFERENCE = {
    "stages": {1: {"mae": 10.221, "precision": 78.9, "recall": 91.0, "f1": 84.3},
               2: {"mae": 3.531, "precision": 92.7, "recall": 90.5, "f1": 91.5}},
    "points": {4: {"precision": 52.4, "recall": 11.2, "f1": 16.8},
               8: {"precision": 98.5, "recall": 91.0, "f1": 94.5},
               16: {"precision": 98.7, "recall": 91.9, "f1": 95.1}},
    "features": {"visual": {"f1": 90.7}, "visual+vector": {"f1": 94.9},
                 "visual+line": {"f1": 92.3}, "all": {"f1": 95.1}},
}

GRIDS = {
    "stages": [1, 2],
    "points": [4, 8, 16],
    "features": ["visual", "visual+vector", "visual+line", "all"],
}


@dataclass
class AblationTable:
    grid: str
    rows: list  # dicts: cell, present, precision/recall/f1 (+ _sd), mae, reference

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        # per-patch mean and sd, pooled F1, and the reference F1; all rates as fractions
        w.writerow([self.grid, "present", "MAE", "Precision", "Precision_sd", "Recall", "Recall_sd",
                    "F1", "F1_sd", "pooled_F1", "ref_F1"])
        for r in self.rows:
            ref = r["reference"].get("f1")
            ref = None if ref is None else ref / 100.0
            if not r["present"]:
                w.writerow([r["cell"], 0] + [""] * 8 + [_fmt(ref)])
                continue
            w.writerow([r["cell"], 1, _fmt(r.get("mae")),
                        _fmt(r["precision"]), _fmt(r["precision_sd"]),
                        _fmt(r["recall"]), _fmt(r["recall_sd"]),
                        _fmt(r["f1"]), _fmt(r["f1_sd"]), _fmt(r["pooled_f1"]), _fmt(ref)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid, "rows": self.rows}, sort_keys=True, indent=1)

    def row(self, cell):
        for r in self.rows:
            if r["cell"] == cell:
                return r
        raise KeyError(cell)


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def run_ablation(grid: str, reports: dict) -> AblationTable:
    """Assemble one ablation table from per-cell reports.

    ``reports`` maps grid cells to a :class:`MetricsReport` (plant metrics for
    the "stages" grid, line metrics otherwise). Cells without a report are
    listed as absent.
    """
    if grid not in GRIDS:
        raise ValueError(f"unknown ablation grid {grid!r}; choose from {sorted(GRIDS)}")
    rows = []
    for cell in GRIDS[grid]:
        ref = REFERENCE[grid].get(cell, {})
        rep = reports.get(cell)
        if rep is None:
            rows.append({"cell": cell, "present": False, "reference": ref})
            continue
        rows.append({
            "cell": cell, "present": True, "reference": ref, "mae": rep.mae,
            "precision": rep.mean.get("precision"), "precision_sd": rep.sd.get("precision"),
            "recall": rep.mean.get("recall"), "recall_sd": rep.sd.get("recall"),
            "f1": rep.mean.get("f1"), "f1_sd": rep.sd.get("f1"),
            "pooled_f1": rep.f1,
        })
    return AblationTable(grid, rows)
