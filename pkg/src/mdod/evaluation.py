"""Greedy detection matching and COCO-style interpolated average precision."""
from __future__ import annotations

import csv
from typing import Mapping, Sequence, Union

import numpy as np

from mdod.geometry import Box, iou_matrix
from mdod.inference import Detection

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _det_box(d) -> Box:
    return d.box if isinstance(d, Detection) else d


def _det_class(d) -> int:
    return d.class_id


def _det_score(d) -> float:
    return d.score


def match_detections(dets: Sequence, gts: Sequence[Box], iou_threshold: float) -> list[bool]:
    """True-positive flag per detection; ``dets`` must already be sorted by descending score.

    Each detection takes the unmatched same-class ground truth with the
    highest IoU, provided that IoU reaches ``iou_threshold``.
    """
    if not dets:
        return []
    det_boxes = np.array([_det_box(d).ltrb for d in dets])
    gt_boxes = np.array([g.ltrb for g in gts]).reshape(-1, 4)
    ious = iou_matrix(det_boxes, gt_boxes)
    gt_cls = np.array([g.class_id for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for i, d in enumerate(dets):
        cand = np.where((gt_cls == _det_class(d)) & ~taken & (ious[i] >= iou_threshold), ious[i], -1.0)
        j = int(np.argmax(cand)) if len(gts) else -1
        if j >= 0 and cand[j] >= 0:
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _as_images(dets, gts):
    if isinstance(gts, Mapping):
        return dets, gts
    return {"_": list(dets)}, {"_": list(gts)}


def _sorted(dets: Sequence) -> list:
    order = sorted(range(len(dets)), key=lambda i: -_det_score(dets[i]))
    return [dets[i] for i in order]


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(values.mean())


def per_class_ap(dets: Mapping[str, Sequence], gts: Mapping[str, Sequence[Box]],
                 iou_threshold: float) -> dict[int, float]:
    classes = sorted({g.class_id for boxes in gts.values() for g in boxes})
    out = {}
    for c in classes:
        scores, flags, n_gt = [], [], 0
        for image_id, image_gts in gts.items():
            cls_gts = [g for g in image_gts if g.class_id == c]
            n_gt += len(cls_gts)
            cls_dets = _sorted([d for d in dets.get(image_id, ()) if _det_class(d) == c])
            flags.extend(match_detections(cls_dets, cls_gts, iou_threshold))
            scores.extend(_det_score(d) for d in cls_dets)
        out[c] = interpolated_ap(np.array(scores, dtype=np.float64), np.array(flags, dtype=bool), n_gt)
    return out


def average_precision(dets: Union[Sequence, Mapping[str, Sequence]], gts: Union[Sequence[Box], Mapping],
                      iou_threshold: float = 0.5) -> float:
    """Class-mean AP at one IoU threshold; classes absent from the ground truth are skipped."""
    dets, gts = _as_images(dets, gts)
    aps = per_class_ap(dets, gts, iou_threshold)
    if not aps:
        raise ValueError("AP is undefined: no ground-truth boxes")
    return float(np.mean(list(aps.values())))


def evaluate(dets, gts) -> dict[str, float]:
    """AP (mean over IoU 0.50:0.05:0.95), AP50 and per-class AP (averaged over thresholds)."""
    dets, gts = _as_images(dets, gts)
    per_thr = {t: per_class_ap(dets, gts, t) for t in COCO_THRESHOLDS}
    if not per_thr[0.5]:
        raise ValueError("AP is undefined: no ground-truth boxes")
    report = {
        "AP": float(np.mean([np.mean(list(v.values())) for v in per_thr.values()])),
        "AP50": float(np.mean(list(per_thr[0.5].values()))),
    }
    for c in per_thr[0.5]:
        report[f"AP_class{c}"] = float(np.mean([per_thr[t][c] for t in COCO_THRESHOLDS]))
    return report


def write_report_csv(path, report: Mapping[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for k, v in report.items():
            writer.writerow([k, repr(float(v))])
