"""Boxes, coordinate transforms, IoU and non-maximum suppression.

Boxes live in continuous pixel coordinates as ``(l, t, r, b)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    l: float
    t: float
    r: float
    b: float
    class_id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.l, self.t, self.r, self.b)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.l > self.r or self.t > self.b:
            raise ValueError(f"box must satisfy l <= r and t <= b, got {coords}")

    @property
    def ltrb(self) -> tuple[float, float, float, float]:
        return (self.l, self.t, self.r, self.b)

    @property
    def area(self) -> float:
        return (self.r - self.l) * (self.b - self.t)

    def as_array(self) -> np.ndarray:
        return np.array(self.ltrb, dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.r, b.r) - max(a.l, b.l)
    ih = min(a.b, b.b) - max(a.t, b.t)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ltrb arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def xywh_to_ltrb(cx, cy, w, h):
    """Center/size to corners. Works on floats, arrays and autodiff tensors alike."""
    if isinstance(w, (int, float)) and (w < 0 or h < 0):
        raise ValueError(f"width and height must be non-negative, got {w}, {h}")
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def ltrb_to_xywh(l, t, r, b):
    return (l + r) / 2, (t + b) / 2, r - l, b - t


def _sort_key_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score: equal scores keep insertion order
    return np.argsort(-scores, kind="stable")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, class_ids: np.ndarray,
                iou_threshold: float) -> np.ndarray:
    """Greedy per-class NMS over arrays; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = _sort_key_order(scores)
    ious = iou_matrix(boxes, boxes)
    same_class = class_ids[:, None] == class_ids[None, :]
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= same_class[i] & (ious[i] > iou_threshold)
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Box], iou_threshold: float = 0.5) -> list[Box]:
    """Per-class greedy NMS. Boxes of different ``class_id`` never suppress each other."""
    if not dets:
        return []
    if any(d.score is None for d in dets):
        raise ValueError("every detection needs a score for NMS")
    boxes = np.array([d.ltrb for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([-1 if d.class_id is None else d.class_id for d in dets])
    keep = nms_indices(boxes, scores, classes, iou_threshold)
    return [dets[i] for i in keep]
