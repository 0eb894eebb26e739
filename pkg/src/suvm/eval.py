"""Scoring detections against ground truth: matching, precision/recall, confusion, sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Box = tuple[float, float, float, float]


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class TruthObject:
    label: str
    box: Box
    part_boxes: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass
class GroundTruth:
    """Per-image annotations; consulted only when scoring."""

    categories: list[str]
    images: list[dict]  # {"file", "width", "height", "objects": [TruthObject]}

    def __post_init__(self):
        for im in self.images:
            objs = []
            for o in im.get("objects", []):
                if not isinstance(o, TruthObject):
                    o = TruthObject(o["label"], tuple(float(v) for v in o["box"]),
                                    {int(k): tuple(v) for k, v in o.get("part_boxes", {}).items()})
                if o.label not in self.categories:
                    raise ValueError(f"label {o.label!r} not among declared categories")
                w, h = im.get("width"), im.get("height")
                x0, y0, x1, y1 = o.box
                if w is not None and (x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0):
                    raise ValueError(f"box {o.box} outside image {im.get('file')}")
                objs.append(o)
            im["objects"] = objs

    @classmethod
    def load(cls, path) -> "GroundTruth":
        data = json.loads(Path(path).read_text())
        return cls(list(data["categories"]), list(data["images"]))

    def boxes(self, label: str | None = None) -> list[list[Box]]:
        return [[o.box for o in im["objects"] if label is None or o.label == label] for im in self.images]

    def part_boxes(self, part: int) -> list[list[Box]]:
        return [[o.part_boxes[part] for o in im["objects"] if part in o.part_boxes] for im in self.images]

    @property
    def files(self) -> list[str]:
        return [im["file"] for im in self.images]


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    actual_positives: int | None = None
    curve: list = field(default_factory=list)
    confusion: dict | None = None

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")
        if self.actual_positives is None:
            self.actual_positives = self.tp + self.fn

    @property
    def precision(self) -> float:
        """TP / (TP + FP); 1.0 when nothing was reported."""
        claimed = self.tp + self.fp
        return self.tp / claimed if claimed else 1.0

    @property
    def recall(self) -> float:
        """TP / actual positives; 0.0 when there are none."""
        return self.tp / self.actual_positives if self.actual_positives else 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out.update(precision=self.precision, recall=self.recall)
        return out

    def table(self) -> str:
        rows = [("TP", str(self.tp)), ("FP", str(self.fp)), ("FN", str(self.fn)),
                ("actual positives", str(self.actual_positives)),
                ("coverage/recall", f"{100 * self.recall:.1f}%"), ("precision", f"{100 * self.precision:.1f}%")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows) + "\n"


def metrics_from_counts(tp: int, fp: int, actual_positives: int) -> MetricsReport:
    return MetricsReport(tp, fp, actual_positives - tp, actual_positives)


def _det_order(dets: Sequence[tuple[Box, float]]) -> list[int]:
    """Descending score; equal scores ordered by box coordinates."""
    return sorted(range(len(dets)), key=lambda k: (-dets[k][1], tuple(dets[k][0])))


def match_image(dets: Sequence[tuple[Box, float]], truths: Sequence[Box], iou_threshold: float = 0.5):
    """Greedy one-to-one matching; returns (tp, fp, fn, matched truth per detection)."""
    claimed = [False] * len(truths)
    match = [-1] * len(dets)
    for k in _det_order(dets):
        box = dets[k][0]
        best, best_iou = -1, iou_threshold
        for t, tb in enumerate(truths):
            if claimed[t]:
                continue
            v = iou(box, tb)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = t, v
        if best >= 0:
            claimed[best] = True
            match[k] = best
    tp = sum(claimed)
    return tp, len(dets) - tp, len(truths) - tp, match


def match_detections(detections: Sequence[Sequence[tuple[Box, float]]], truth: Sequence[Sequence[Box]],
                     iou_threshold: float = 0.5) -> MetricsReport:
    """Aggregate greedy matching over images (detections as (box, score) pairs)."""
    if len(detections) != len(truth):
        raise ValueError("detections and truth cover different image counts")
    tp = fp = fn = 0
    for dets, truths in zip(detections, truth):
        a, b, c, _ = match_image(dets, truths, iou_threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    return MetricsReport(tp, fp, fn)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float


def threshold_sweep(detections, truth, thresholds, iou_threshold: float = 0.5) -> list[CurvePoint]:
    """Precision and recall keeping detections with score >= each threshold."""
    out = []
    for thr in thresholds:
        kept = [[d for d in dets if d[1] >= thr] for dets in detections]
        rep = match_detections(kept, truth, iou_threshold)
        out.append(CurvePoint(float(thr), rep.tp, rep.fp, rep.fn, rep.precision, rep.recall))
    return out


@dataclass
class ConfusionMatrix:
    labels: list[str]
    matrix: np.ndarray  # rows: query category, columns: model
    flagged: list[str]  # query categories with no images

    def to_json(self) -> dict:
        return {"labels": self.labels, "flagged": self.flagged,
                "matrix": [[None if math.isnan(v) else float(v) for v in row] for row in self.matrix]}

    def table(self) -> str:
        w = max(8, max(len(s) for s in self.labels) + 1)
        head = " " * w + "".join(f"{s:>{w}}" for s in self.labels)
        rows = [head]
        for lab, row in zip(self.labels, self.matrix):
            rows.append(f"{lab:<{w}}" + "".join(f"{v:>{w}.3f}" for v in row))
        return "\n".join(rows) + "\n"


def confusion_matrix(labels: Sequence[str], models: Sequence, queries: Sequence[Sequence],
                     detector: Callable[[object, object], Sequence]) -> ConfusionMatrix:
    """Entry (i, j): fraction of category-i queries where model j reports at least one instance."""
    if len(models) != len(labels) or len(queries) != len(labels):
        raise ValueError("one model and one query set per category")
    M = np.full((len(labels), len(labels)), np.nan)
    flagged = []
    for i, images in enumerate(queries):
        if not len(images):
            flagged.append(labels[i])
            continue
        for j, model in enumerate(models):
            M[i, j] = np.mean([len(detector(model, im)) > 0 for im in images])
    return ConfusionMatrix(list(labels), M, flagged)
