"""Detection AP and collision-regression metrics.

Detection evaluation follows the de facto COCO convention: greedy
score-descending matching to the highest-IoU unmatched ground truth,
101-point interpolated precision-recall curves, averaging over IoU
thresholds 0.50:0.05:0.95 and over classes that have ground truth.
Size slices use relative-area bins (see dataset.size_bin) instead of
absolute pixel areas:

- a ground truth outside the slice is ignored: detections matched to it
  count neither as true nor as false positives;
- an unmatched detection is attributed to its highest-IoU ground truth
  (same image and class); if that ground truth is outside the slice the
  detection is ignored, otherwise (or with no overlapping ground truth
  at all) it is a false positive.

Regression metrics: RMSE and WMAE, where WMAE weights each absolute
error by (ground truth + 1) and normalizes by the total weight, so
high-collision locations dominate the score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import BoxAnnotation, size_bin
from .errors import ValidationError
from .geo import ImageRecord

IOU_THRESHOLDS_DEFAULT = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_SLICES = ("small", "medium", "large")


@dataclass(frozen=True)
class DetectionRecord:
    """A predicted box with its confidence score."""

    image_id: str
    category_id: int
    bbox: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValidationError(
                f"detection on image {self.image_id!r}: box sides must be positive, got w={w}, h={h}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(
                f"detection on image {self.image_id!r}: score {self.score} outside [0, 1]"
            )


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS_DEFAULT
    max_detections_per_image: int = 100

    def __post_init__(self):
        ts = tuple(self.iou_thresholds)
        if not ts or any(not 0.0 < t <= 1.0 for t in ts):
            raise ValidationError("iou_thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("iou_thresholds must be strictly increasing")
        if self.max_detections_per_image < 1:
            raise ValidationError("max_detections_per_image must be >= 1")


@dataclass
class RegressionPairSet:
    """Aligned ground-truth collision counts and predictions."""

    image_ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=float)
        self.y_pred = np.asarray(self.y_pred, dtype=float)
        if not (len(self.image_ids) == len(self.y_true) == len(self.y_pred)):
            raise ValidationError("regression pair arrays must have equal length")
        if np.any(self.y_true < 0):
            raise ValidationError("ground-truth collision counts must be >= 0")

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class APReport:
    """AP summary; a slice is None when it has no ground truth."""

    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
        }


def iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes; 0 when disjoint."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def rmse(pairs: RegressionPairSet) -> float:
    """Root mean squared prediction error."""
    if len(pairs) == 0:
        raise ValidationError("rmse requires at least one pair")
    return float(np.sqrt(np.mean((pairs.y_true - pairs.y_pred) ** 2)))


def wmae(pairs: RegressionPairSet) -> float:
    """Weighted mean absolute error with weights (y_true + 1).

    sum_i (y_i + 1) |y_i - yhat_i| / sum_i (y_i + 1): equal absolute errors
    contribute proportionally to (y + 1), so misses at high-collision
    locations are penalized the hardest.
    """
    if len(pairs) == 0:
        raise ValidationError("wmae requires at least one pair")
    w = pairs.y_true + 1.0
    return float(np.sum(w * np.abs(pairs.y_true - pairs.y_pred)) / np.sum(w))


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated average precision.

    Precision is replaced by its running maximum from the right, sampled
    at recalls 0.00, 0.01, ..., 1.00; recalls never attained contribute 0.
    """
    if len(recall) == 0:
        return 0.0
    prec = precision.copy()
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(prec), prec[np.minimum(idx, len(prec) - 1)], 0.0)
    return float(np.mean(sampled))


def _greedy_match(det_order: list[int], iou_mat: np.ndarray, threshold: float) -> np.ndarray:
    """Match detections (in score order) to their best unmatched gt.

    Returns, per detection, the matched gt column or -1. Ties on IoU go to
    the earliest ground truth in input order.
    """
    n_gt = iou_mat.shape[1]
    matched_gt = np.full(iou_mat.shape[0], -1, dtype=int)
    gt_taken = np.zeros(n_gt, dtype=bool)
    for d in det_order:
        best_iou = -1.0
        best_g = -1
        for g in range(n_gt):
            if gt_taken[g]:
                continue
            v = iou_mat[d, g]
            if v >= threshold and v > best_iou:
                best_iou = v
                best_g = g
        if best_g >= 0:
            matched_gt[d] = best_g
            gt_taken[best_g] = True
    return matched_gt


def evaluate_detection(
    gts: list[BoxAnnotation],
    dets: list[DetectionRecord],
    images: list[ImageRecord],
    config: EvalConfig | None = None,
    categories: list[int] | None = None,
) -> APReport:
    """Evaluate detections against ground truth and report AP metrics.

    categories, when given, is the set of valid category ids; any other id
    in the inputs raises ValidationError. Classes without ground truth are
    excluded from every mean (reported as None when no class qualifies).
    """
    config = config or EvalConfig()
    image_by_id = {im.image_id: im for im in images}
    if len(image_by_id) != len(images):
        raise ValidationError("duplicate image_id in evaluation input")

    known = set(categories) if categories is not None else None
    for g in gts:
        if g.image_id not in image_by_id:
            raise ValidationError(f"ground truth {g.annotation_id!r} references unknown image {g.image_id!r}")
        if known is not None and g.category_id not in known:
            raise ValidationError(f"ground truth {g.annotation_id!r} has unknown category_id {g.category_id}")
    for d in dets:
        if d.image_id not in image_by_id:
            raise ValidationError(f"detection references unknown image {d.image_id!r}")
        if known is not None and d.category_id not in known:
            raise ValidationError(f"detection on image {d.image_id!r} has unknown category_id {d.category_id}")

    # Cap detections per image: keep the top-scoring K (stable in input order).
    by_image: dict[str, list[tuple[int, DetectionRecord]]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append((i, d))
    kept: list[tuple[int, DetectionRecord]] = []
    for img_id in by_image:
        ranked = sorted(by_image[img_id], key=lambda t: (-t[1].score, t[0]))
        kept.extend(ranked[: config.max_detections_per_image])

    gt_classes = sorted({g.category_id for g in gts})
    if not gt_classes:
        return APReport(None, None, None, None, None, None)

    thresholds = config.iou_thresholds
    # ap_sum[slice][t] accumulates per-class AP; counts track qualifying classes.
    slice_names = ("all",) + SIZE_SLICES
    ap_sum = {s: np.zeros(len(thresholds)) for s in slice_names}
    class_count = {s: 0 for s in slice_names}

    for cls in gt_classes:
        cls_gts: dict[str, list[BoxAnnotation]] = {}
        for g in gts:
            if g.category_id == cls:
                cls_gts.setdefault(g.image_id, []).append(g)
        cls_dets = [(i, d) for i, d in kept if d.category_id == cls]
        cls_dets.sort(key=lambda t: (-t[1].score, t[0]))

        gt_bins: dict[str, list[str]] = {}
        for img_id, boxes in cls_gts.items():
            im = image_by_id[img_id]
            img_area = im.width * im.height
            gt_bins[img_id] = [size_bin(g.area / img_area) for g in boxes]
        n_gt_slice = {"all": sum(len(v) for v in cls_gts.values())}
        for s in SIZE_SLICES:
            n_gt_slice[s] = sum(b.count(s) for b in gt_bins.values())

        # Per image: IoU matrix between this class's detections and gts.
        det_rows: dict[str, list[int]] = {}
        for row, (_, d) in enumerate(cls_dets):
            det_rows.setdefault(d.image_id, []).append(row)
        iou_mats: dict[str, np.ndarray] = {}
        for img_id, rows in det_rows.items():
            boxes = cls_gts.get(img_id, [])
            mat = np.zeros((len(rows), len(boxes)))
            for r, row in enumerate(rows):
                for c, g in enumerate(boxes):
                    mat[r, c] = iou(cls_dets[row][1].bbox, g.bbox)
            iou_mats[img_id] = mat

        # Highest-IoU gt per detection, for attributing unmatched detections.
        nearest_bin: list[str | None] = [None] * len(cls_dets)
        for img_id, rows in det_rows.items():
            mat = iou_mats[img_id]
            if mat.size == 0:
                continue
            for r, row in enumerate(rows):
                c = int(np.argmax(mat[r]))
                if mat[r, c] > 0.0:
                    nearest_bin[row] = gt_bins[img_id][c]

        for ti, t in enumerate(thresholds):
            # matched bin per detection: None = unmatched.
            matched_bin: list[str | None] = [None] * len(cls_dets)
            for img_id, rows in det_rows.items():
                mat = iou_mats[img_id]
                local = _greedy_match(list(range(len(rows))), mat, t)
                for r, row in enumerate(rows):
                    if local[r] >= 0:
                        matched_bin[row] = gt_bins[img_id][local[r]]

            for s in slice_names:
                n_pos = n_gt_slice[s]
                if n_pos == 0:
                    continue
                tp, fp = [], []
                for row in range(len(cls_dets)):
                    mb = matched_bin[row]
                    if mb is not None:
                        if s == "all" or mb == s:
                            tp.append(1.0); fp.append(0.0)
                        # matched to an out-of-slice gt: ignored
                    else:
                        nb = nearest_bin[row]
                        if s == "all" or nb is None or nb == s:
                            tp.append(0.0); fp.append(1.0)
                        # nearest gt out of slice: ignored
                if tp:
                    tp_cum = np.cumsum(tp)
                    fp_cum = np.cumsum(fp)
                    recall = tp_cum / n_pos
                    precision = tp_cum / (tp_cum + fp_cum)
                    ap_sum[s][ti] += _interpolated_ap(recall, precision)

        for s in slice_names:
            if n_gt_slice[s] > 0:
                class_count[s] += 1

    def _mean(s: str, t_idx: int | None = None) -> float | None:
        if class_count[s] == 0:
            return None
        if t_idx is None:
            return float(np.mean(ap_sum[s]) / class_count[s])
        return float(ap_sum[s][t_idx] / class_count[s])

    t50 = thresholds.index(0.5) if 0.5 in thresholds else None
    t75 = thresholds.index(0.75) if 0.75 in thresholds else None
    return APReport(
        ap=_mean("all"),
        ap50=_mean("all", t50) if t50 is not None else None,
        ap75=_mean("all", t75) if t75 is not None else None,
        ap_small=_mean("small"),
        ap_medium=_mean("medium"),
        ap_large=_mean("large"),
    )
