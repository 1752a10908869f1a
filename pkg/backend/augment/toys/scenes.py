"""Procedural street scenes with red-rectangle pedestrians.

Day scenes have a neutral grey background in a bright band; night scenes
are the same construction scaled by NIGHT_GAIN. Background pixels are grey
(equal channels) so the rectangles can be recovered from redness alone.
"""
from dataclasses import replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from ..domain import DAY, NIGHT, PEDESTRIAN, BoundingBox, DatasetManifest, ImageSample, ObjectAnnotation, iou, \
    rectangles_intersect
from ..utils.images import write_image
from ..utils.seeding import numpy_rng

# ==========================================
# CONFIGURATION
# ==========================================
SCENE_SIZE = (64, 64)            # (height, width)
DAY_BAND = (0.55, 0.85)
NIGHT_GAIN = 0.25
PEDESTRIAN_RGB = (0.95, 0.08, 0.08)
PEDESTRIAN_HEIGHT = (22, 40)
PEDESTRIAN_WIDTH = (8, 14)
MAX_PEDESTRIANS = 3
REDNESS_THRESHOLD = 0.05


def make_scene(image_id: str, domain: str, rng: np.random.Generator, size: tuple[int, int] = SCENE_SIZE,
               max_pedestrians: int = MAX_PEDESTRIANS) -> ImageSample:
    height, width = size
    base = rng.uniform(*DAY_BAND)
    rows = np.linspace(-0.05, 0.05, height)[:, None]
    grey = np.clip(base + rows + rng.normal(0.0, 0.02, size=(height, width)), 0.0, 1.0)
    pixels = np.repeat(grey[:, :, None], 3, axis=2)

    boxes: list[BoundingBox] = []
    wanted = int(rng.integers(1, max_pedestrians + 1))
    for _ in range(50):
        if len(boxes) == wanted:
            break
        h = int(rng.integers(PEDESTRIAN_HEIGHT[0], min(PEDESTRIAN_HEIGHT[1], height - 2) + 1))
        w = int(rng.integers(PEDESTRIAN_WIDTH[0], min(PEDESTRIAN_WIDTH[1], width - 2) + 1))
        x0 = int(rng.integers(1, width - w))
        y0 = int(rng.integers(1, height - h))
        box = BoundingBox(x0, y0, x0 + w, y0 + h)
        if any(rectangles_intersect(box, other) for other in boxes):
            continue
        boxes.append(box)
        pixels[y0:y0 + h, x0:x0 + w] = PEDESTRIAN_RGB

    if domain == NIGHT:
        pixels = pixels * NIGHT_GAIN
    annotations = tuple(ObjectAnnotation(PEDESTRIAN, box) for box in boxes)
    return ImageSample(image_id, width, height, domain, annotations,
                       pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32))


def make_split(prefix: str, domain: str, count: int, seed: int, size: tuple[int, int] = SCENE_SIZE) -> DatasetManifest:
    rng = numpy_rng(seed, 'scenes', prefix, domain)
    return DatasetManifest(make_scene(f'{prefix}_{index:04d}', domain, rng, size) for index in range(count))


def make_toy_dataset(num_day: int = 16, num_night: int = 16, seed: int = 0,
                     size: tuple[int, int] = SCENE_SIZE) -> tuple[DatasetManifest, DatasetManifest]:
    """(day manifest, night manifest) with pixels attached."""
    return make_split('day', DAY, num_day, seed, size), make_split('night', NIGHT, num_night, seed, size)


def intensity_band(manifest: DatasetManifest) -> tuple[float, float]:
    means = [float(np.mean(s.pixels)) for s in manifest]
    return min(means), max(means)


def write_split(manifest: DatasetManifest, root: Union[str, Path], subdir: str = 'images') -> DatasetManifest:
    """Write each sample as PNG under root/subdir and return the manifest with relative paths."""
    root = Path(root)
    written = []
    for sample in manifest:
        relative = f'{subdir}/{sample.image_id}.png'
        write_image(sample.pixels, root / relative)
        written.append(replace(sample, image_path=relative, pixels=None))
    return DatasetManifest(written)


# ==========================================
# RE-LOCALISATION
# ==========================================

def relocalize_rectangles(pixels: np.ndarray, threshold: float = REDNESS_THRESHOLD,
                          min_area: int = 4) -> list[BoundingBox]:
    """Bounding boxes of connected red regions (R - max(G, B) above threshold)."""
    redness = pixels[..., 0] - np.maximum(pixels[..., 1], pixels[..., 2])
    labels, _ = ndimage.label(redness > threshold)
    boxes = []
    for rows, cols in ndimage.find_objects(labels):
        box = BoundingBox(cols.start, rows.start, cols.stop, rows.stop)
        if box.area >= min_area:
            boxes.append(box)
    return boxes


def coverage_iou(annotations: Sequence[ObjectAnnotation], found: Sequence[BoundingBox]) -> float:
    """Mean over ground-truth rectangles of the best IoU with a re-localised box."""
    if not annotations:
        return 1.0
    return float(np.mean([max((iou(a.box, b) for b in found), default=0.0) for a in annotations]))
