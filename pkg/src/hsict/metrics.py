"""Confusion matrix, one-vs-rest scores, ROC/PR curves and PCA projection.

Rates are reported in percent. Per-class scores treat the class as the
positive label and every other class as negative.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import CLASS_NAMES

Z_95 = 1.96


def confusion_matrix(preds, labels, num_classes: int = 5) -> np.ndarray:
    """counts[t, p]: rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("predictions", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} must lie in 0..{num_classes - 1}")
    return np.bincount(labels * num_classes + preds, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def one_vs_rest(cm: np.ndarray, c: int) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for class ``c``."""
    cm = np.asarray(cm)
    tp = int(cm[c, c])
    fp = int(cm[:, c].sum()) - tp
    fn = int(cm[c, :].sum()) - tp
    tn = int(cm.sum()) - tp - fp - fn
    return tp, fp, fn, tn


@dataclass
class ClassScores:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    acc: float
    sen: float | None
    pre: float | None
    f1: float | None
    sen_ci95: tuple[float, float] | None


@dataclass
class Scores:
    per_class: list[ClassScores]
    macro_acc: float
    macro_sen: float
    macro_pre: float
    macro_f1: float
    accuracy: float          # trace(cm) / total, the headline number
    undefined_sen: list[str] = field(default_factory=list)

    def row(self) -> str:
        """Acc / Sen / Pre / F1 with two decimals."""
        return f"{self.accuracy:.2f} / {self.macro_sen:.2f} / {self.macro_pre:.2f} / {self.macro_f1:.2f}"


def _nanmean(vals: Sequence[float | None]) -> float:
    kept = [v for v in vals if v is not None]
    return float(np.mean(kept)) if kept else 0.0


def classification_scores(cm, names: Sequence[str] = CLASS_NAMES) -> Scores:
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    per = []
    undefined = []
    for c in range(cm.shape[0]):
        tp, fp, fn, tn = one_vs_rest(cm, c)
        acc = 100.0 * (tp + tn) / total
        sen = tp / (tp + fn) if tp + fn else None
        pre = tp / (tp + fp) if tp + fp else None
        if sen is not None and pre is not None:
            f1 = 2 * pre * sen / (pre + sen) if pre + sen else 0.0
        else:
            f1 = None
        ci = None
        if sen is None:
            undefined.append(names[c])
        else:
            half = Z_95 * math.sqrt(sen * (1 - sen) / (tp + fn))
            ci = (100.0 * max(0.0, sen - half), 100.0 * min(1.0, sen + half))
        pct = (lambda v: None if v is None else 100.0 * v)
        per.append(ClassScores(names[c], tp, fp, fn, tn, acc, pct(sen), pct(pre), pct(f1), ci))
    return Scores(
        per_class=per,
        macro_acc=_nanmean([s.acc for s in per]),
        macro_sen=_nanmean([s.sen for s in per]),
        macro_pre=_nanmean([s.pre for s in per]),
        macro_f1=_nanmean([s.f1 for s in per]),
        accuracy=100.0 * float(np.trace(cm)) / total,
        undefined_sen=undefined,
    )


# -- curves ------------------------------------------------------------------------------

@dataclass
class Curve:
    x: list[float]
    y: list[float]
    auc: float | None


def _binary_counts(scores: np.ndarray, positive: np.ndarray):
    """Cumulative TP/FP counts at each distinct threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(pos)[last]
    fps = np.cumsum(~pos)[last]
    return tps, fps


def roc_curve(scores, positive) -> Curve:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return Curve([], [], None)
    tps, fps = _binary_counts(scores, positive)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return Curve(fpr.tolist(), tpr.tolist(), float(np.trapezoid(tpr, fpr)))


def pr_curve(scores, positive) -> Curve:
    """Precision/recall at every threshold; area by right-continuous steps."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        return Curve([], [], None)
    tps, fps = _binary_counts(scores, positive)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(np.r_[0.0, recall].tolist(), np.r_[1.0, precision].tolist(), auc)


@dataclass
class CurveSet:
    roc: list[Curve]
    pr: list[Curve]
    macro_roc_auc: float | None
    macro_pr_auc: float | None
    undefined: list[str]


def roc_pr_curves(probs, labels, names: Sequence[str] = CLASS_NAMES) -> CurveSet:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError(f"probabilities {probs.shape} do not match {labels.size} labels")
    rocs, prs, undefined = [], [], []
    for c in range(probs.shape[1]):
        pos = labels == c
        r, p = roc_curve(probs[:, c], pos), pr_curve(probs[:, c], pos)
        if r.auc is None:
            undefined.append(names[c])
        rocs.append(r)
        prs.append(p)

    def macro(cs):
        vals = [c.auc for c in cs if c.auc is not None]
        return float(np.mean(vals)) if vals else None

    return CurveSet(rocs, prs, macro(rocs), macro(prs), undefined)


# -- PCA -------------------------------------------------------------------------------

@dataclass
class PcaResult:
    projections: np.ndarray
    components: np.ndarray       # (k, d), rows are unit loading vectors
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca_project(features, k: int = 2) -> PcaResult:
    """Project onto the top-k covariance eigenvectors.

    Each component is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an (n, d) matrix")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"need 1 <= k <= min(n, d) = {min(n, d)}, got k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0.0:
        return PcaResult(np.zeros((n, k)), np.eye(d)[:k], np.zeros(k), mean)
    comps = evecs[:, :k].T.copy()
    for i, row in enumerate(comps):
        if row[np.argmax(np.abs(row))] < 0:
            comps[i] = -row
    return PcaResult(xc @ comps.T, comps, evals[:k] / total, mean)


# -- baseline -------------------------------------------------------------------------

def pixel_histograms(images: np.ndarray, bins: int = 16, value_range=(-1.0, 1.0)) -> np.ndarray:
    """Per-channel intensity histograms, normalized to sum to 1 per channel."""
    images = np.asarray(images)
    n, c = images.shape[:2]
    lo, hi = value_range
    idx = np.clip(((images - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1).reshape(n, c, -1)
    out = np.zeros((n, c, bins))
    for i in range(n):
        for ch in range(c):
            out[i, ch] = np.bincount(idx[i, ch], minlength=bins)
    return (out / idx.shape[-1]).reshape(n, -1)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Accuracy (fraction) of a Euclidean nearest-class-mean classifier."""
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(1)] == np.asarray(test_y)))


# -- report ------------------------------------------------------------------------------

REPORT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["n", "accuracy", "macro", "per_class", "confusion_matrix", "roc_auc", "pr_auc", "config"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 100},
        "macro": {
            "type": "object",
            "required": ["acc", "sen", "pre", "f1"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 100} for k in ("acc", "sen", "pre", "f1")},
        },
        "undefined_sen": {"type": "array", "items": {"type": "string"}},
        "per_class": {
            "type": "array",
            "minItems": 5,
            "maxItems": 5,
            "items": {
                "type": "object",
                "required": ["name", "tp", "fp", "fn", "tn", "acc", "sen", "pre", "f1", "sen_ci95"],
                "properties": {
                    "name": {"type": "string"},
                    "tp": {"type": "integer", "minimum": 0},
                    "fp": {"type": "integer", "minimum": 0},
                    "fn": {"type": "integer", "minimum": 0},
                    "tn": {"type": "integer", "minimum": 0},
                    "acc": {"type": "number", "minimum": 0, "maximum": 100},
                    "sen": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
                    "pre": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
                    "f1": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
                    "sen_ci95": {"oneOf": [{"type": "null"}, {"type": "array", "minItems": 2, "maxItems": 2,
                                                               "items": {"type": "number"}}]},
                },
            },
        },
        "confusion_matrix": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "roc_auc": {"type": "array", "items": {"type": ["number", "null"]}},
        "pr_auc": {"type": "array", "items": {"type": ["number", "null"]}},
        "macro_roc_auc": {"type": ["number", "null"]},
        "macro_pr_auc": {"type": ["number", "null"]},
        "config": {"type": ["object", "null"]},
    },
}


@dataclass
class EvalReport:
    matrix: np.ndarray
    scores: Scores
    curves: CurveSet
    config: dict | None = None

    @classmethod
    def build(cls, probs, labels, config: dict | None = None) -> "EvalReport":
        probs = np.asarray(probs)
        labels = np.asarray(labels)
        cm = confusion_matrix(probs.argmax(axis=1), labels, probs.shape[1])
        return cls(cm, classification_scores(cm), roc_pr_curves(probs, labels), config)

    @property
    def n(self) -> int:
        return int(self.matrix.sum())

    def to_dict(self) -> dict[str, Any]:
        s = self.scores
        return {
            "n": self.n,
            "accuracy": s.accuracy,
            "macro": {"acc": s.macro_acc, "sen": s.macro_sen, "pre": s.macro_pre, "f1": s.macro_f1},
            "undefined_sen": list(s.undefined_sen),
            "per_class": [{**asdict(c), "sen_ci95": list(c.sen_ci95) if c.sen_ci95 else None} for c in s.per_class],
            "confusion_matrix": self.matrix.tolist(),
            "roc_auc": [c.auc for c in self.curves.roc],
            "pr_auc": [c.auc for c in self.curves.pr],
            "macro_roc_auc": self.curves.macro_roc_auc,
            "macro_pr_auc": self.curves.macro_pr_auc,
            "config": self.config,
        }

    def table(self) -> str:
        fmt = (lambda v: "  n/a " if v is None else f"{v:6.2f}")
        lines = [f"{'class':<12}{'Acc':>8}{'Sen':>8}{'Pre':>8}{'F1':>8}"]
        for c in self.scores.per_class:
            lines.append(f"{c.name:<12}  {fmt(c.acc)}  {fmt(c.sen)}  {fmt(c.pre)}  {fmt(c.f1)}")
        s = self.scores
        lines.append(f"{'macro':<12}  {fmt(s.macro_acc)}  {fmt(s.macro_sen)}  {fmt(s.macro_pre)}  {fmt(s.macro_f1)}")
        lines.append(f"Acc / Sen / Pre / F1: {s.row()}   (n={self.n})")
        return "\n".join(lines)

    def write(self, directory: str | Path, stem: str = "report") -> dict[str, Path]:
        """JSON report, per-class CSV and per-class curve CSVs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"json": d / f"{stem}.json", "csv": d / f"{stem}.csv", "curves": d / f"{stem}_curves.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2))
        with open(paths["csv"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "tp", "fp", "fn", "tn", "acc", "sen", "pre", "f1", "sen_ci_lo", "sen_ci_hi"])
            for c in self.scores.per_class:
                lo, hi = c.sen_ci95 if c.sen_ci95 else ("", "")
                w.writerow([c.name, c.tp, c.fp, c.fn, c.tn, c.acc, _blank(c.sen), _blank(c.pre), _blank(c.f1), lo, hi])
        with open(paths["curves"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "curve", "x", "y"])
            for name, roc, pr in zip(CLASS_NAMES, self.curves.roc, self.curves.pr):
                for kind, cur in (("roc", roc), ("pr", pr)):
                    for x, y in zip(cur.x, cur.y):
                        w.writerow([name, kind, x, y])
        return paths


def _blank(v):
    return "" if v is None else v
