"""Classification metrics, ROC/AUC, and sweep-report aggregation.

AUC is computed two independent ways: trapezoidal area under the
tie-grouped ROC curve, and the brute-force probability that a positive
outranks a negative (ties half-counted). The two agree to float
precision and the tests hold them to 1e-12.

Multiclass ROC is one-vs-rest per class; the reported "average" curve
macro-averages the per-class curves on a common false-positive grid and
the reported AUC is the unweighted mean of per-class AUCs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


def accuracy(predictions, labels):
    """Per-class and average accuracy.

    Returns (average, per_class) where per_class maps class index to
    correct_c / count_c for classes that appear in ``labels``; the
    average is the unweighted mean over those classes (absent classes
    are excluded, not counted as zero).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise MetricsError(f"predictions {predictions.shape} vs labels "
                           f"{labels.shape}, need equal and nonempty")
    per_class: dict[int, float] = {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float((predictions[sel] == c).mean())
    average = float(np.mean(list(per_class.values())))
    return average, per_class


def roc_curve(scores, labels) -> np.ndarray:
    """ROC points from a descending threshold sweep over distinct scores.

    Tied scores are grouped (one point per distinct score), and the
    (0,0) and (1,1) endpoints are always present. Labels are binary with
    1 = positive; both classes must appear.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise MetricsError("roc_curve needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            tp += int(y_sorted[j] == 1)
            fp += int(y_sorted[j] == 0)
            j += 1
        points.append((fp / neg, tp / pos))
        i = j
    return np.array(points)


def auc(points) -> float:
    """Trapezoidal area under ROC points (sorted by FPR)."""
    points = np.asarray(points, dtype=np.float64)
    x, y = points[:, 0], points[:, 1]
    return float(np.sum(np.diff(x) * (y[:-1] + y[1:]) * 0.5))


def pairwise_ranking_auc(scores, labels) -> float:
    """Independent AUC route: P(score_pos > score_neg) + 0.5 P(tie) over
    all positive/negative pairs, by exhaustive comparison."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    sp = scores[labels == 1]
    sn = scores[labels == 0]
    if len(sp) == 0 or len(sn) == 0:
        raise MetricsError("pairwise AUC needs both classes present")
    wins = (sp[:, None] > sn[None, :]).sum()
    ties = (sp[:, None] == sn[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(sp) * len(sn)))


def _upper_envelope(points):
    """Collapse a staircase to one (fpr, max tpr) pair per distinct fpr,
    so vertical segments interpolate sanely."""
    points = np.asarray(points, dtype=np.float64)
    xs, idx = np.unique(points[:, 0], return_index=True)
    ys = np.maximum.reduceat(points[:, 1], idx)
    return xs, ys


def macro_average_roc(per_class_points) -> np.ndarray:
    """Average several ROC curves on the union of their FPR grids
    (linear interpolation per curve, mean TPR per grid point). The
    (0,0) anchor is kept explicitly since averaging takes the top of
    each curve's initial vertical segment."""
    envelopes = [_upper_envelope(p) for p in per_class_points]
    grid = np.unique(np.concatenate([xs for xs, _ in envelopes]))
    tprs = [np.interp(grid, xs, ys) for xs, ys in envelopes]
    pts = np.column_stack([grid, np.mean(tprs, axis=0)])
    if pts[0, 1] != 0.0:
        pts = np.vstack([[0.0, 0.0], pts])
    return pts


def score_roc_auc(class_scores, labels):
    """ROC points and AUC from per-class scores (B, K).

    K == 2 uses the positive-class score directly; K > 2 goes
    one-vs-rest with a macro-averaged curve and mean per-class AUC.
    Classes with no positives or no negatives in ``labels`` are skipped.
    """
    class_scores = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(labels)
    k = class_scores.shape[1]
    if k == 2:
        points = roc_curve(class_scores[:, 1], (labels == 1).astype(int))
        return points, auc(points)
    curves = []
    aucs = []
    for c in range(k):
        binary = (labels == c).astype(int)
        if binary.min() == binary.max():
            continue
        pts = roc_curve(class_scores[:, c], binary)
        curves.append(pts)
        aucs.append(auc(pts))
    if not curves:
        raise MetricsError("no class had both positives and negatives")
    return macro_average_roc(curves), float(np.mean(aucs))


# ---------------------------------------------------------------------------
# run reports and sweep aggregation

@dataclass
class RunReport:
    """Everything one (configuration, backbone) experiment produced."""
    config: dict
    per_class_accuracy: dict[int, float]
    average_accuracy: float
    roc_points: list = field(repr=False)
    auc: float = 0.0
    final_losses: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    seed: int = 0

    def validate(self):
        accs = [self.average_accuracy, *self.per_class_accuracy.values()]
        if any(a < 0.0 or a > 1.0 for a in accs):
            raise MetricsError(f"accuracy outside [0,1]: {accs}")
        pts = np.asarray(self.roc_points)
        if len(pts):
            if tuple(pts[0]) != (0.0, 0.0) or tuple(pts[-1]) != (1.0, 1.0):
                raise MetricsError("ROC endpoints must be (0,0) and (1,1)")
            if np.any(np.diff(pts[:, 0]) < 0) or np.any(np.diff(pts[:, 1]) < 0):
                raise MetricsError("ROC points must be monotone")
        return self

    def to_json(self) -> str:
        d = asdict(self)
        d["roc_points"] = [[float(a), float(b)] for a, b in self.roc_points]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d["per_class_accuracy"] = {int(k): v
                                   for k, v in d["per_class_accuracy"].items()}
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        return cls(**d)


@dataclass
class SweepGrid:
    """Complete (configuration row) x (backbone column) result grid."""
    triplets: list[str]
    presets: list[str]
    cells: dict = field(default_factory=dict)   # (triplet, preset) -> RunReport

    def put(self, triplet: str, preset: str, report: RunReport):
        self.cells[(triplet, preset)] = report

    def get(self, triplet: str, preset: str) -> RunReport:
        return self.cells[(triplet, preset)]

    def missing(self):
        return [(t, p) for p in self.presets for t in self.triplets
                if (t, p) not in self.cells]


def _slug(name: str) -> str:
    return name.replace(":", "-").replace("+", "and")


def aggregate_sweep(grid: SweepGrid, out_dir) -> dict:
    """Write the sweep tables: summary CSV (per-class + average accuracy,
    best-per-preset flag), full JSON reports, and one fpr/tpr CSV per
    cell for external plotting. Returns the written paths."""
    missing = grid.missing()
    if missing:
        raise MetricsError(f"sweep grid incomplete, missing cells: {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    classes = sorted({c for r in grid.cells.values()
                      for c in r.per_class_accuracy})
    best_avg = {p: max(grid.get(t, p).average_accuracy for t in grid.triplets)
                for p in grid.presets}

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["triplet", "preset",
                         *[f"class_{c}" for c in classes], "avg", "best"])
        for preset in grid.presets:
            for triplet in grid.triplets:
                r = grid.get(triplet, preset)
                row = [triplet, preset]
                row += [f"{r.per_class_accuracy[c]:.6f}"
                        if c in r.per_class_accuracy else "" for c in classes]
                row.append(f"{r.average_accuracy:.6f}")
                row.append("1" if r.average_accuracy == best_avg[preset] else "0")
                writer.writerow(row)

    json_path = out_dir / "sweep.json"
    payload = [{"triplet": t, "preset": p,
                "report": json.loads(grid.get(t, p).to_json())}
               for p in grid.presets for t in grid.triplets]
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))

    roc_paths = []
    for (triplet, preset), report in sorted(grid.cells.items()):
        path = out_dir / f"roc_{_slug(preset)}_{_slug(triplet)}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["fpr", "tpr"])
            for fpr, tpr in report.roc_points:
                writer.writerow([f"{fpr:.12g}", f"{tpr:.12g}"])
        roc_paths.append(path)

    return {"csv": csv_path, "json": json_path, "roc": roc_paths}
