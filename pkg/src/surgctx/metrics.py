"""Frame accuracy, segmental edit score and segment-matched IOU."""

from __future__ import annotations

import csv
import io
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Sequence

from .trial_io import ContextFrame

TABLE_COLUMNS = ["Left Hold", "Left Contact", "Right Hold", "Right Contact", "Needle or Knot", "Avg"]


@dataclass(frozen=True)
class Segment:
    start: int  # inclusive
    end: int    # exclusive
    label: Hashable

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"segment {self.label!r}: start {self.start} >= end {self.end}")

    def __len__(self) -> int:
        return self.end - self.start


def align(gt: Sequence, pred: Sequence) -> tuple[Sequence, Sequence]:
    """Truncate both series to their common length, warning when they differ."""
    if len(gt) != len(pred):
        n = min(len(gt), len(pred))
        warnings.warn(
            f"label series differ in length (gt {len(gt)}, pred {len(pred)}); truncated to {n}",
            stacklevel=3,
        )
        return gt[:n], pred[:n]
    return gt, pred


def segments(labels: Sequence[Hashable]) -> list[Segment]:
    """Run-length encode a label series; None samples are gaps."""
    out = []
    i, n = 0, len(labels)
    while i < n:
        j = i + 1
        while j < n and labels[j] == labels[i]:
            j += 1
        if labels[i] is not None:
            out.append(Segment(i, j, labels[i]))
        i = j
    return out


def accuracy(gt: Sequence[Hashable], pred: Sequence[Hashable]) -> float:
    """Percentage of samples whose labels agree."""
    gt, pred = align(gt, pred)
    if not gt:
        return 100.0
    return 100.0 * sum(g == p for g, p in zip(gt, pred)) / len(gt)


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Insertions + deletions + substitutions turning ``a`` into ``b``."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def segment_edit_score(gt_labels: Sequence[Hashable], pred_labels: Sequence[Hashable]) -> float:
    """Edit score between two already segmented label sequences."""
    n = max(len(gt_labels), len(pred_labels))
    if n == 0:
        return 100.0
    return (1.0 - levenshtein(gt_labels, pred_labels) / n) * 100.0


def edit_score(gt: Sequence[Hashable], pred: Sequence[Hashable]) -> float:
    """Segmental edit score of two per-sample label series.

    Both series are run-length encoded first, so only the order of segment
    labels matters, not their durations.
    """
    return segment_edit_score([s.label for s in segments(gt)], [s.label for s in segments(pred)])


def segment_iou(gt: Sequence[Segment], pred: Sequence[Segment]) -> tuple[dict[Hashable, float], float]:
    """Per-class and mean IOU of predicted segments against ground truth.

    Predicted segments are visited in temporal order and matched to the
    still-unmatched ground-truth segment of the same class with the largest
    overlap. A segment scores TP/(TP+FP+FN) in samples; unmatched
    predictions score 0. A class averages over its predicted segments, a
    class present only in the ground truth scores 0, and the overall value
    is the mean over classes. Matching is directional (pred -> gt).
    """
    used: set[int] = set()
    scores: dict[Hashable, list[float]] = defaultdict(list)
    for p in sorted(pred, key=lambda s: (s.start, s.end)):
        best, best_k = 0, None
        for k, g in enumerate(gt):
            if k in used or g.label != p.label:
                continue
            overlap = min(p.end, g.end) - max(p.start, g.start)
            if overlap > best:
                best, best_k = overlap, k
        if best_k is None:
            scores[p.label].append(0.0)
            continue
        used.add(best_k)
        g = gt[best_k]
        scores[p.label].append(best / (len(p) + len(g) - best))
    per_class = {label: sum(v) / len(v) for label, v in scores.items()}
    for g in gt:
        per_class.setdefault(g.label, 0.0)
    if not per_class:
        return {}, 1.0
    return per_class, sum(per_class.values()) / len(per_class)


def series_iou(gt: Sequence[Hashable], pred: Sequence[Hashable]) -> tuple[dict[Hashable, float], float]:
    gt, pred = align(gt, pred)
    return segment_iou(segments(gt), segments(pred))


def value_iou(gt: Sequence[Hashable], pred: Sequence[Hashable]) -> tuple[dict[Hashable, float], float]:
    """Per-value IOU from sample counts (TP/(TP+FP+FN)) and their mean."""
    gt, pred = align(gt, pred)
    out = {}
    for v in sorted(set(gt) | set(pred), key=str):
        tp = sum(g == v and p == v for g, p in zip(gt, pred))
        fp = sum(g != v and p == v for g, p in zip(gt, pred))
        fn = sum(g == v and p != v for g, p in zip(gt, pred))
        out[v] = tp / (tp + fp + fn)
    if not out:
        return {}, 1.0
    return out, sum(out.values()) / len(out)


def state_variable_report(gt: Sequence[ContextFrame], pred: Sequence[ContextFrame]) -> dict[str, float]:
    """IOU of each context state variable plus their average, keyed like the report table."""
    gt, pred = align(gt, pred)
    row = {}
    for i, col in enumerate(TABLE_COLUMNS[:5]):
        _, row[col] = value_iou([f.values[i] for f in gt], [f.values[i] for f in pred])
    row["Avg"] = sum(row[c] for c in TABLE_COLUMNS[:5]) / 5
    return row


@dataclass
class GestureScores:
    accuracy: float
    edit: float
    iou: float


def gesture_scores(gt: Sequence[Hashable], pred: Sequence[Hashable]) -> GestureScores:
    gt, pred = align(gt, pred)
    return GestureScores(accuracy(gt, pred), edit_score(gt, pred), series_iou(gt, pred)[1])


# ---------------------------------------------------------------- report tables


def report_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def report_text(rows: Sequence[dict], columns: Sequence[str], digits: int = 2) -> str:
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r[c]:.{digits}f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) if k else cell.ljust(w) for k, (cell, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

