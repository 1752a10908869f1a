"""Value objects for images, annotations and datasets, plus box geometry.

All types are frozen; operations return new objects and never mutate their
inputs, so they can be shared freely between worker threads.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .exceptions import AnnotationMismatch, InvalidGeometry

# ==========================================
# CONFIGURATION
# ==========================================
DAY = 'day'
NIGHT = 'night'
SYNTHETIC_NIGHT = 'synthetic_night'
DOMAINS = (DAY, NIGHT, SYNTHETIC_NIGHT)

PEDESTRIAN = 'pedestrian'

# Slack for boxes that land a hair outside the frame after float rescaling.
BOUNDS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class BoundingBox:
    """Corner-encoded box in continuous pixel coordinates, top-left origin."""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidGeometry(f'non-finite box coordinates {coords}')
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidGeometry(f'degenerate box {coords}: need x0<x1 and y0<y1')
        for name in ('x0', 'y0', 'x1', 'y1'):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def scaled(self, sx: float, sy: float) -> 'BoundingBox':
        return BoundingBox(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)

    def clipped(self, width: float, height: float) -> Optional['BoundingBox']:
        """Clip to the frame; None if nothing with positive area is left."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(width)), min(self.y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class ObjectAnnotation:
    label: str
    box: BoundingBox
    occlusion_fraction: float = 0.0
    ignore: bool = False

    def __post_init__(self):
        if not self.label:
            raise InvalidGeometry('annotation label must be non-empty')
        if not (0.0 <= self.occlusion_fraction <= 1.0):
            raise InvalidGeometry(
                f'occlusion fraction {self.occlusion_fraction} outside [0, 1]'
            )

    @property
    def is_pedestrian(self) -> bool:
        return self.label == PEDESTRIAN


AnnotationSet = tuple[ObjectAnnotation, ...]


@dataclass(frozen=True)
class ImageSample:
    """One image with its domain, size and annotations.

    ``pixels`` is an H×W×C float array in [0, 1] or None for manifest
    entries that have not been loaded yet (see ``utils.images.load_sample``).
    """
    image_id: str
    width: int
    height: int
    domain: str
    annotations: AnnotationSet = ()
    source_image_id: Optional[str] = None
    image_path: Optional[str] = None
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.image_id:
            raise AnnotationMismatch('image_id must be non-empty')
        if self.domain not in DOMAINS:
            raise AnnotationMismatch(f'unknown domain {self.domain!r}; expected one of {DOMAINS}')
        if self.width <= 0 or self.height <= 0:
            raise InvalidGeometry(f'{self.image_id}: image size must be positive')
        if self.domain == SYNTHETIC_NIGHT and not self.source_image_id:
            raise AnnotationMismatch(f'{self.image_id}: synthetic samples need a source_image_id')

        object.__setattr__(self, 'annotations', tuple(self.annotations))
        for anno in self.annotations:
            b = anno.box
            if (b.x0 < -BOUNDS_TOLERANCE or b.y0 < -BOUNDS_TOLERANCE
                    or b.x1 > self.width + BOUNDS_TOLERANCE
                    or b.y1 > self.height + BOUNDS_TOLERANCE):
                raise InvalidGeometry(
                    f'{self.image_id}: box {b.as_tuple()} outside {self.width}x{self.height}'
                )

        if self.pixels is not None:
            pixels = np.array(self.pixels, dtype=np.float32 if self.pixels.dtype.kind != 'f' else self.pixels.dtype)
            if pixels.ndim != 3 or pixels.shape[:2] != (self.height, self.width):
                raise AnnotationMismatch(
                    f'{self.image_id}: pixel array {pixels.shape} does not match '
                    f'{self.height}x{self.width}xC'
                )
            if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
                raise AnnotationMismatch(f'{self.image_id}: intensities must lie in [0, 1]')
            pixels.flags.writeable = False
            object.__setattr__(self, 'pixels', pixels)

    @property
    def is_loaded(self) -> bool:
        return self.pixels is not None

    @property
    def pedestrians(self) -> AnnotationSet:
        return tuple(a for a in self.annotations if a.is_pedestrian and not a.ignore)

    def with_pixels(self, pixels: np.ndarray) -> 'ImageSample':
        return replace(self, pixels=pixels)


class DatasetManifest:
    """Ordered, id-unique collection of samples."""

    def __init__(self, entries: Iterable[ImageSample] = ()):
        self._entries: tuple[ImageSample, ...] = tuple(entries)
        self._index: dict[str, int] = {}
        for position, entry in enumerate(self._entries):
            if entry.image_id in self._index:
                raise AnnotationMismatch(f'duplicate image_id {entry.image_id!r} in manifest')
            self._index[entry.image_id] = position

    @property
    def entries(self) -> tuple[ImageSample, ...]:
        return self._entries

    @property
    def domain_counts(self) -> dict[str, int]:
        counts = {domain: 0 for domain in DOMAINS}
        for entry in self._entries:
            counts[entry.domain] += 1
        return counts

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self._entries)

    def __getitem__(self, position: int) -> ImageSample:
        return self._entries[position]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self._entries == other._entries

    def __repr__(self) -> str:
        return f'DatasetManifest({len(self)} entries, {self.domain_counts})'

    def get(self, image_id: str) -> Optional[ImageSample]:
        position = self._index.get(image_id)
        return None if position is None else self._entries[position]

    def filter_domain(self, domain: str) -> 'DatasetManifest':
        return DatasetManifest(e for e in self._entries if e.domain == domain)

    def extended(self, extra: Sequence[ImageSample]) -> 'DatasetManifest':
        return DatasetManifest((*self._entries, *extra))


# ==========================================
# BOX GEOMETRY
# ==========================================

def _overlap(a: BoundingBox, b: BoundingBox) -> tuple[float, float]:
    return (min(a.x1, b.x1) - max(a.x0, b.x0), min(a.y1, b.y1) - max(a.y0, b.y0))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    w, h = _overlap(a, b)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def rectangles_intersect(a: BoundingBox, b: BoundingBox) -> bool:
    """True iff the open interiors overlap. Shared edges do not count."""
    w, h = _overlap(a, b)
    return w > 0 and h > 0


def rescale_annotations(annos: Sequence[ObjectAnnotation], sx: float, sy: float) -> AnnotationSet:
    """
    Scale every box componentwise (x by sx, y by sy).

    Args:
        annos: annotations to scale
        sx, sy: positive scale factors

    Returns:
        New annotation tuple; labels, occlusion and ignore flags unchanged.

    Example:
        (100, 200, 300, 400) with sx=0.3, sy=0.3125 -> (30, 62.5, 90, 125)
    """
    if not (sx > 0 and sy > 0):
        raise InvalidGeometry(f'scale factors must be positive, got ({sx}, {sy})')
    return tuple(replace(a, box=a.box.scaled(sx, sy)) for a in annos)


def inherit_annotations(
    source: ImageSample,
    translated_pixels: np.ndarray,
    image_id: Optional[str] = None,
    scale: Optional[tuple[float, float]] = None,
    image_path: Optional[str] = None,
) -> ImageSample:
    """
    Wrap a translated image as a synthetic_night sample carrying the source boxes.

    The output size must match the source unless ``scale`` = (sx, sy) is
    declared, in which case boxes go through rescale_annotations.
    """
    height, width = translated_pixels.shape[:2]
    annotations = source.annotations
    if scale is not None:
        annotations = rescale_annotations(annotations, *scale)
    elif (width, height) != (source.width, source.height):
        raise AnnotationMismatch(
            f'{source.image_id}: translated size {width}x{height} differs from source '
            f'{source.width}x{source.height} and no scale was declared'
        )

    return ImageSample(
        image_id=image_id or f'{source.image_id}__night',
        width=width,
        height=height,
        domain=SYNTHETIC_NIGHT,
        annotations=tuple(annotations),
        source_image_id=source.image_id,
        image_path=image_path,
        pixels=translated_pixels,
    )
