"""Box-level post-processing and evaluation: IoU, greedy NMS, VOC-style mAP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Detection:
    """One detection: (x, y, w, h) box, class label, score in [0, 1]."""

    box: tuple[float, float, float, float]
    label: str
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"box extents must be positive, got {self.box}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression within each class.

    Detections are visited by descending score (stable for ties); one is kept
    iff its IoU with every previously kept same-class detection is below the
    threshold. The returned order is the visit order of the kept detections.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou threshold must lie in (0, 1), got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        cand = dets[i]
        if all(
            k.label != cand.label or iou(k.box, cand.box) < iou_thresh for k in kept
        ):
            kept.append(cand)
    return kept


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """11-point interpolated average precision."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 11.0


def eval_map(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence],
    iou_thresh: float = 0.5,
) -> float:
    """Mean average precision over classes at a fixed IoU matching threshold.

    Ground truths are any objects with .label and .box. Per class: detections
    are ranked by score across all images, greedily matched to the best
    still-unmatched ground truth of that image (IoU >= threshold counts as a
    true positive), and AP is the 11-point interpolation of the resulting
    precision-recall curve. Classes absent from the ground truth are skipped.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    labels = sorted({g.label for gts in gts_per_image for g in gts})
    if not labels:
        return 0.0
    aps = []
    for label in labels:
        gt_count = 0
        matched: list[list[bool]] = []
        for gts in gts_per_image:
            flags = [False] * sum(1 for g in gts if g.label == label)
            matched.append(flags)
            gt_count += len(flags)
        ranked: list[tuple[float, int, int]] = []
        for img, dets in enumerate(dets_per_image):
            for j, det in enumerate(dets):
                if det.label == label:
                    ranked.append((det.score, img, j))
        ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
        tp = np.zeros(len(ranked))
        fp = np.zeros(len(ranked))
        for rank, (_score, img, j) in enumerate(ranked):
            det = dets_per_image[img][j]
            class_gts = [g for g in gts_per_image[img] if g.label == label]
            best_iou, best_idx = 0.0, -1
            for gi, gt in enumerate(class_gts):
                value = iou(det.box, gt.box)
                if value > best_iou:
                    best_iou, best_idx = value, gi
            if best_iou >= iou_thresh and not matched[img][best_idx]:
                matched[img][best_idx] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        if gt_count == 0:
            continue
        if len(ranked) == 0:
            aps.append(0.0)
            continue
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        recall = tp_cum / gt_count
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        aps.append(_interpolated_ap(recall, precision))
    return float(np.mean(aps)) if aps else 0.0
