"""Classification and detection metrics: confusion matrices, accuracy, IoU, PR."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import BBox


class MetricsError(Exception):
    pass


class LengthMismatchError(MetricsError):
    pass


class IdOutOfRangeError(MetricsError):
    pass


class EmptyMatrixError(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K count table: rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: list[str]


def confusion_matrix(truths, preds, num_classes: int, class_names: list[str] | None = None) -> ConfusionMatrix:
    """Tally (true, predicted) pairs into a ConfusionMatrix."""
    truths = list(truths)
    preds = list(preds)
    if len(truths) != len(preds):
        raise LengthMismatchError(f"{len(truths)} truths vs {len(preds)} predictions")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(truths, preds):
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise IdOutOfRangeError(f"class id ({t},{p}) outside [0,{num_classes})")
        counts[t, p] += 1
    if class_names is None:
        class_names = [f"class_{k}" for k in range(num_classes)]
    counts.flags.writeable = False
    return ConfusionMatrix(counts, list(class_names))


def accuracy_metrics(cm: ConfusionMatrix) -> dict:
    """Overall accuracy (trace/total) and per-class row-normalized diagonals.

    Classes with no samples report NaN rather than a made-up rate.
    """
    total = int(cm.counts.sum())
    if total == 0:
        raise EmptyMatrixError("confusion matrix has no samples")
    row_sums = cm.counts.sum(axis=1)
    per_class = [
        float(cm.counts[k, k]) / row_sums[k] if row_sums[k] > 0 else math.nan
        for k in range(len(cm.class_names))
    ]
    return {
        "overall": float(np.trace(cm.counts)) / total,
        "per_class": per_class,
    }


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class PRResult:
    precision: float
    recall: float
    # (image_index, detection_index, gt_index) per true positive
    matches: list[tuple[int, int, int]] = field(default_factory=list)


def detection_pr(dets_per_image, gts_per_image, iou_threshold: float) -> PRResult:
    """Greedy detection precision/recall at an IoU threshold.

    Detections are matched in descending score order; each ground-truth box
    can be claimed once. With zero detections precision is reported as 1.0
    (no positives were asserted).
    """
    if not (0 < iou_threshold <= 1):
        raise ValueError(f"iou_threshold must be in (0,1], got {iou_threshold}")
    if len(dets_per_image) != len(gts_per_image):
        raise LengthMismatchError("detections and ground truths differ in image count")
    tp = 0
    fp = 0
    n_gt = sum(len(g) for g in gts_per_image)
    matches: list[tuple[int, int, int]] = []
    for img_idx, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        claimed = [False] * len(gts)
        for di in order:
            best_iou, best_gt = 0.0, -1
            for gi, gt in enumerate(gts):
                if claimed[gi]:
                    continue
                v = iou(dets[di].box, gt)
                if v > best_iou:
                    best_iou, best_gt = v, gi
            if best_gt >= 0 and best_iou >= iou_threshold:
                claimed[best_gt] = True
                tp += 1
                matches.append((img_idx, di, best_gt))
            else:
                fp += 1
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / n_gt if n_gt > 0 else 1.0
    return PRResult(precision, recall, matches)


def report_text(cm: ConfusionMatrix) -> str:
    """Render a confusion matrix as an aligned text table with accuracies."""
    metrics = accuracy_metrics(cm)
    names = cm.class_names
    width = max(12, max(len(n) for n in names) + 2)
    out = io.StringIO()
    out.write("".ljust(width))
    for n in names:
        out.write(n.rjust(width))
    out.write("\n")
    for k, n in enumerate(names):
        out.write(n.ljust(width))
        for j in range(len(names)):
            out.write(str(int(cm.counts[k, j])).rjust(width))
        pc = metrics["per_class"][k]
        out.write(f"  {pc * 100:.1f}%" if not math.isnan(pc) else "  n/a")
        out.write("\n")
    out.write(f"overall accuracy: {metrics['overall'] * 100:.2f}%\n")
    return out.getvalue()


def report_csv(cm: ConfusionMatrix) -> str:
    """Emit `true,pred,count` triples."""
    lines = ["true,pred,count"]
    for t, tn in enumerate(cm.class_names):
        for p, pn in enumerate(cm.class_names):
            lines.append(f"{tn},{pn},{int(cm.counts[t, p])}")
    return "\n".join(lines) + "\n"


def report_json(cm: ConfusionMatrix) -> str:
    metrics = accuracy_metrics(cm)
    return json.dumps(
        {
            "class_names": cm.class_names,
            "counts": cm.counts.tolist(),
            "overall": metrics["overall"],
            "per_class": [None if math.isnan(v) else v for v in metrics["per_class"]],
        },
        indent=2,
    )
