"""Detection and localisation metrics: AUROC, AP, F1-max and AUPRO.

All ranking metrics evaluate each distinct score value exactly once, so tied
scores behave like a single threshold.  Pixel metrics pool every pixel of the
evaluated group.  ``evaluate`` produces per-category values, their arithmetic
mean, and optionally the inference-unified values computed once over the
pooled set.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

IMAGE_METRICS = ("I-AUROC", "I-AP", "I-F1max")
PIXEL_METRICS = ("P-AUROC", "P-AP", "P-F1max", "P-AUPRO")
OBJECT_METRICS = ("O-AUROC", "O-AP", "O-F1max")
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class UndefinedMetricError(ValueError):
    pass


class ReportingError(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"no ground truth for {len(self.missing)} image(s): {', '.join(self.missing[:20])}")


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(pos > neg) + 0.5 P(tie)."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(scores, labels):
    """Cumulative TP / FP at every distinct threshold, highest score first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64), s[last]


def average_precision(scores, labels) -> float:
    """``sum_n (R_n - R_{n-1}) P_n`` over the descending threshold sweep."""
    scores, labels = _check(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    tp, fp, _ = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive")
    tp, fp, _ = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]):
    """Global FPR and per-region overlap at every distinct threshold.

    Returns ``(fpr, pro)`` arrays starting at ``(0, 0)``.  PRO is the mean over
    all 8-connected ground-truth components of all images of the fraction of
    the component above threshold.
    """
    scores, weights, negatives = [], [], []
    n_components = 0
    comp_weights = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ValueError(f"map {amap.shape} and mask {mask.shape} differ")
        labelled, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        sizes = np.bincount(labelled.ravel(), minlength=n + 1).astype(np.float64)
        w = np.zeros(n + 1)
        w[1:] = 1.0 / sizes[1:]
        comp_weights.append(w[labelled].ravel())
        n_components += n
        scores.append(amap.ravel())
        negatives.append(~mask.ravel())
    if n_components == 0:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    scores = np.concatenate(scores)
    neg = np.concatenate(negatives)
    weights = np.concatenate(comp_weights) / n_components
    n_neg = neg.sum()
    if n_neg == 0:
        raise UndefinedMetricError("AUPRO needs normal pixels to measure false positives")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    fpr = np.cumsum(neg[order])[last] / n_neg
    pro = np.cumsum(weights[order])[last]
    return np.r_[0.0, fpr], np.r_[0.0, np.minimum(pro, 1.0)]


def _area_up_to(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    inside = x <= limit
    xs, ys = x[inside], y[inside]
    area = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2)) if xs.size > 1 else 0.0
    nxt = np.flatnonzero(~inside)
    if nxt.size and xs[-1] < limit:
        j = nxt[0]
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        area += (limit - x0) * (y0 + y_lim) / 2
    return area


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under the PRO-vs-FPR curve on ``[0, fpr_limit]``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must be in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return _area_up_to(fpr, pro, fpr_limit) / fpr_limit


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalItem:
    image_id: str
    category: str
    label: int
    score: float
    full_map: np.ndarray | None = None
    mask: np.ndarray | None = None
    object_id: str | None = None
    object_score: float | None = None


@dataclass
class EvalReport:
    per_category: dict[str, dict[str, float]]
    mean: dict[str, float]
    unified: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready dict; undefined (NaN) metrics become ``None``."""
        clean = lambda ms: None if ms is None else {k: (None if math.isnan(v) else v) for k, v in ms.items()}
        return {
            "per_category": {c: clean(ms) for c, ms in self.per_category.items()},
            "mean": clean(self.mean),
            "unified": clean(self.unified),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self):
        for cat, ms in sorted(self.per_category.items()):
            for name, value in ms.items():
                yield cat, name, value
        for name, value in self.mean.items():
            yield "mean", name, value
        if self.unified is not None:
            for name, value in self.unified.items():
                yield "unified", name, value

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "metric", "value"])
        for row in self.rows():
            w.writerow([row[0], row[1], f"{row[2]:.6f}"])
        return buf.getvalue()


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return float("nan")


def metric_set(items: Sequence[EvalItem], fpr_limit: float = 0.3) -> dict[str, float]:
    scores = [it.score for it in items]
    labels = [it.label for it in items]
    out = {
        "I-AUROC": _safe(auroc, scores, labels),
        "I-AP": _safe(average_precision, scores, labels),
        "I-F1max": _safe(f1_max, scores, labels),
    }
    pix = [it for it in items if it.full_map is not None and (it.mask is not None or it.label == 0)]
    if pix:
        maps = [np.asarray(it.full_map) for it in pix]
        masks = [np.zeros(m.shape, bool) if it.mask is None else np.asarray(it.mask, bool) for it, m in zip(pix, maps)]
        flat_s = np.concatenate([m.ravel() for m in maps])
        flat_y = np.concatenate([m.ravel() for m in masks])
        out["P-AUROC"] = _safe(auroc, flat_s, flat_y)
        out["P-AP"] = _safe(average_precision, flat_s, flat_y)
        out["P-F1max"] = _safe(f1_max, flat_s, flat_y)
        out["P-AUPRO"] = _safe(aupro, maps, masks, fpr_limit)
    objects = _objects(items)
    if objects:
        o_scores = [s for s, _ in objects.values()]
        o_labels = [y for _, y in objects.values()]
        out["O-AUROC"] = _safe(auroc, o_scores, o_labels)
        out["O-AP"] = _safe(average_precision, o_scores, o_labels)
        out["O-F1max"] = _safe(f1_max, o_scores, o_labels)
    return out


def _objects(items):
    groups: dict[str, list[EvalItem]] = defaultdict(list)
    for it in items:
        if it.object_id is not None and it.object_score is not None:
            groups[it.object_id].append(it)
    return {oid: (members[0].object_score, max(m.label for m in members)) for oid, members in groups.items()}


def evaluate(items: Iterable[EvalItem], mode: str = "per_category", fpr_limit: float = 0.3) -> EvalReport:
    """Per-category metrics and their mean; ``mode="unified"`` adds pooled metrics."""
    if mode not in ("per_category", "unified"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    items = list(items)
    by_cat: dict[str, list[EvalItem]] = defaultdict(list)
    for it in items:
        by_cat[it.category].append(it)
    per_category = {cat: metric_set(group, fpr_limit) for cat, group in sorted(by_cat.items())}
    names = sorted({n for ms in per_category.values() for n in ms}, key=_metric_order)
    mean = {}
    for n in names:
        vals = [ms[n] for ms in per_category.values() if n in ms and not math.isnan(ms[n])]
        mean[n] = float(np.mean(vals)) if vals else float("nan")
    per_category = {c: {n: ms[n] for n in sorted(ms, key=_metric_order)} for c, ms in per_category.items()}
    unified = None
    if mode == "unified":
        unified = metric_set(items, fpr_limit)
        unified = {n: unified[n] for n in sorted(unified, key=_metric_order)}
    return EvalReport(per_category, mean, unified, {"mode": mode, "fpr_limit": fpr_limit, "num_images": len(items)})


_ORDER = OBJECT_METRICS + IMAGE_METRICS + PIXEL_METRICS


def _metric_order(name: str) -> int:
    return _ORDER.index(name) if name in _ORDER else len(_ORDER)


def assemble(predictions: Mapping[str, dict], truth: Mapping[str, dict],
             load_map: Callable[[dict], np.ndarray | None] | None = None,
             load_mask: Callable[[dict, tuple], np.ndarray | None] | None = None) -> list[EvalItem]:
    """Join predictions and ground truth by image id.

    ``predictions[id]`` needs ``score`` and may carry ``object_id`` /
    ``object_score``; ``truth[id]`` needs ``category`` and ``label``.
    """
    missing = sorted(set(predictions) - set(truth))
    if missing:
        raise ReportingError(missing)
    items = []
    for image_id, pred in sorted(predictions.items()):
        gt = truth[image_id]
        full = load_map(pred) if load_map else None
        mask = None
        if load_mask is not None and full is not None and gt.get("label"):
            mask = load_mask(gt, full.shape)
        items.append(EvalItem(
            image_id=image_id,
            category=gt["category"],
            label=int(gt["label"]),
            score=float(pred["score"]),
            full_map=full,
            mask=mask,
            object_id=pred.get("object_id"),
            object_score=pred.get("object_score"),
        ))
    return items
