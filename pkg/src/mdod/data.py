"""Synthetic multi-object scenes and the dataset directory format.

Layout of a dataset directory::

    manifest.txt              one image id per line
    images/<image_id>.png     8-bit RGB, lossless
    annotations/<image_id>.txt

Annotation grammar (whitespace separated, one record per line)::

    file   := header object*
    header := <image_id>
    object := <class_id:int> <l:float> <t:float> <r:float> <b:float>

Floats are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from mdod.geometry import Box, iou

SHAPES = ("rectangle", "disc", "triangle")
_MASK64 = (1 << 64) - 1


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class Scene:
    image: np.ndarray            # (H, W, 3) float64 in [0, 1]
    annotations: list[Box]
    image_id: str

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.image_id == other.image_id
                and self.annotations == other.annotations
                and self.image.shape == other.image.shape and np.array_equal(self.image, other.image))


@dataclass(frozen=True)
class DataGenConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 10
    max_size: int = 28
    color_jitter: float = 0.15
    noise: float = 0.04
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("object sizes must satisfy 2 <= min_size <= max_size <= image_size")


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def scene_seed(master_seed: int, index: int) -> int:
    """Seed of scene ``index``: SplitMix64 applied to ``master + index * golden_gamma``."""
    return splitmix64((master_seed + index * 0x9E3779B97F4A7C15) & _MASK64)


def _shape_mask(kind: str, size: int, l: float, t: float, w: float, h: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "rectangle":
        return (xx >= l) & (xx < l + w) & (yy >= t) & (yy < t + h)
    if kind == "disc":
        r = min(w, h) / 2
        return (xx - (l + r)) ** 2 + (yy - (t + r)) ** 2 <= r * r
    # apex-up triangle inscribed in the box
    apex_x = l + w / 2
    rel = (yy - t) / h
    half = rel * w / 2
    return (yy >= t) & (yy < t + h) & (np.abs(xx - apex_x) <= half)


def _tight_box(mask: np.ndarray, class_id: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), class_id=class_id)


def generate_scene(config: DataGenConfig, rng: np.random.Generator, image_id: str = "scene") -> Scene:
    size = config.image_size
    base = rng.uniform(0.0, 0.35, size=3)
    image = base + rng.normal(0.0, config.noise, size=(size, size, 3))
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    annotations: list[Box] = []
    for _ in range(count):
        cls = int(rng.integers(config.num_classes))
        kind = SHAPES[cls]
        for attempt in range(50):
            w = rng.uniform(config.min_size, config.max_size)
            h = w if kind == "disc" else rng.uniform(config.min_size, config.max_size)
            l = rng.uniform(0, size - w)
            t = rng.uniform(0, size - h)
            mask = _shape_mask(kind, size, l, t, w, h)
            if not mask.any():
                continue
            box = _tight_box(mask, cls)
            if attempt == 49 or all(iou(box, other) <= config.max_overlap for other in annotations):
                break
        color = rng.uniform(0.55, 1.0, size=3) + rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        image[mask] = color
        annotations.append(box)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return Scene(image=pixels / 255.0, annotations=annotations, image_id=image_id)


def generate_dataset(config: DataGenConfig, count: int, prefix: str = "scene", offset: int = 0) -> list[Scene]:
    """``count`` scenes, scene ``i`` seeded by ``scene_seed(config.seed, offset + i)``."""
    return [generate_scene(config, np.random.default_rng(scene_seed(config.seed, offset + i)),
                           image_id=f"{prefix}{offset + i:06d}")
            for i in range(count)]


def format_annotation(scene: Scene) -> str:
    lines = [scene.image_id]
    for b in scene.annotations:
        lines.append(f"{b.class_id} {float(b.l)!r} {float(b.t)!r} {float(b.r)!r} {float(b.b)!r}")
    return "\n".join(lines) + "\n"


def parse_annotation(text: str, path="<string>") -> tuple[str, list[Box]]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(path, 1, "missing image id header")
    image_id = lines[0].strip()
    boxes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise DatasetFormatError(path, lineno, f"expected 'class_id l t r b', got {line!r}")
        try:
            cls = int(fields[0])
            coords = [float(v) for v in fields[1:]]
            boxes.append(Box(*coords, class_id=cls))
        except ValueError as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from exc
    return image_id, boxes


def save_dataset(scenes: Sequence[Scene], directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        pixels = np.round(scene.image * 255).astype(np.uint8)
        if not np.array_equal(pixels / 255.0, scene.image):
            raise ValueError(f"scene {scene.image_id}: image is not 8-bit quantised and cannot be stored losslessly")
        Image.fromarray(pixels, mode="RGB").save(root / "images" / f"{scene.image_id}.png")
        (root / "annotations" / f"{scene.image_id}.txt").write_text(format_annotation(scene))
    (root / "manifest.txt").write_text("".join(f"{s.image_id}\n" for s in scenes))


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8) / 255.0


def load_dataset(directory) -> list[Scene]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        warnings.warn(f"{root}: no manifest.txt, treating as an empty dataset")
        return []
    ids = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if line.strip():
            ids.append((lineno, line.strip()))
    if not ids:
        warnings.warn(f"{root}: manifest lists no scenes")
    scenes = []
    for lineno, image_id in ids:
        ann_path = root / "annotations" / f"{image_id}.txt"
        img_path = root / "images" / f"{image_id}.png"
        if not ann_path.exists() or not img_path.exists():
            raise DatasetFormatError(manifest, lineno, f"files for {image_id!r} are missing")
        header, boxes = parse_annotation(ann_path.read_text(), ann_path)
        if header != image_id:
            raise DatasetFormatError(ann_path, 1, f"header {header!r} does not match id {image_id!r}")
        scenes.append(Scene(image=load_image(img_path), annotations=boxes, image_id=image_id))
    return scenes
