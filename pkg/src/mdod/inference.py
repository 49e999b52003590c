"""Turn a fitted mixture into a list of detections."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from mdod.geometry import Box, nms_indices
from mdod.mixture import MixtureModel

DETECTION_HEADER = ["image_id", "class_id", "score", "l", "t", "r", "b"]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    component: int = -1

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def normalized_pi(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    top = pi.max() if pi.size else 0.0
    if top <= 0:
        raise ValueError("mixing vector has no positive entry")
    return pi / top


def extract_detections(model: MixtureModel, pi_filter: float = 0.1, score_filter: float = 0.05,
                       nms_threshold: float = 0.5) -> list[Detection]:
    """Component locations as boxes, filtered by normalised pi and class score, then per-class NMS.

    A component is dropped when its normalised mixing weight is below
    ``pi_filter``, when its best foreground probability is below
    ``score_filter``, or when background is its most likely class.
    """
    c = model.num_classes
    keep = normalized_pi(model.pi) >= pi_filter
    fg = model.p[:, :c]
    cls = np.argmax(fg, axis=1)
    score = fg[np.arange(model.K), cls]
    keep &= score >= score_filter
    keep &= np.argmax(model.p, axis=1) != model.background
    idx = np.flatnonzero(keep)
    boxes = model.boxes_ltrb()
    kept = idx[nms_indices(boxes[idx], score[idx], cls[idx], nms_threshold)]
    return [Detection(Box(*boxes[k], class_id=int(cls[k]), score=float(score[k])),
                      int(cls[k]), float(score[k]), int(k)) for k in kept]


def detect(detector, images: np.ndarray, pi_filter: float = 0.1, score_filter: float = 0.05,
           nms_threshold: float = 0.5, batch_size: int = 16) -> list[list[Detection]]:
    """Run ``detector`` over ``(N, H, W, 3)`` images; one detection list per image."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        batch = detector(images[start:start + batch_size])
        for i in range(len(images[start:start + batch_size])):
            out.append(extract_detections(batch.image(i).to_model(), pi_filter, score_filter, nms_threshold))
    return out


def write_detections_csv(path, detections: Mapping[str, Sequence[Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_HEADER)
        for image_id, dets in detections.items():
            for d in dets:
                writer.writerow([image_id, d.class_id, repr(d.score)] + [repr(float(v)) for v in d.box.ltrb])


def read_detections_csv(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cls, score = int(row["class_id"]), float(row["score"])
            box = Box(*(float(row[k]) for k in "ltrb"), class_id=cls, score=score)
            out.setdefault(row["image_id"], []).append(Detection(box, cls, score))
    return out


def detections_to_records(detections: Mapping[str, Sequence[Detection]]) -> Iterable[dict]:
    for image_id, dets in detections.items():
        for d in dets:
            yield {"image_id": image_id, "class_id": d.class_id, "score": d.score,
                   "bbox_ltrb": [float(v) for v in d.box.ltrb]}


def write_detections_jsonl(path, detections: Mapping[str, Sequence[Detection]]) -> None:
    with open(path, "w") as fh:
        for rec in detections_to_records(detections):
            fh.write(json.dumps(rec) + "\n")
