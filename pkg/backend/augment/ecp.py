"""EuroCity Persons ground truth -> manifest entries.

Identity mapping:
    pedestrian                                   -> pedestrian
    rider, person-group-far-away,
    rider+vehicle-group-far-away                 -> other, ignore=True
    anything else (vehicles, bicycles, ...)      -> dropped

Occlusion tags map to representative fractions; the largest tag wins.
"""
import logging
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .domain import PEDESTRIAN, BoundingBox, DatasetManifest, ImageSample, ObjectAnnotation, rescale_annotations
from .exceptions import ConfigError, InvalidGeometry, ManifestFormatError
from .utils import jsonl
from .utils.images import resize_image

logger = logging.getLogger(__name__)

IDENTITY_MAP = {
    'pedestrian': (PEDESTRIAN, False),
    'rider': ('other', True),
    'person-group-far-away': ('other', True),
    'rider+vehicle-group-far-away': ('other', True),
}

OCCLUSION_TAGS = {
    'occluded>10': 0.25,
    'occluded>40': 0.5,
    'occluded>80': 0.9,
}

# Published downscale for 1920x1024 -> 576x320.
PUBLISHED_SCALE = (0.3, 0.3125)


def occlusion_fraction(tags: Iterable[str]) -> float:
    return max((OCCLUSION_TAGS.get(tag, 0.0) for tag in tags), default=0.0)


def _walk(children: Iterable[dict]) -> Iterator[dict]:
    for child in children:
        yield child
        yield from _walk(child.get('children', ()))


def parse_objects(record: dict, width: int, height: int) -> tuple[ObjectAnnotation, ...]:
    annotations = []
    for child in _walk(record.get('children', ())):
        mapped = IDENTITY_MAP.get(child.get('identity'))
        if mapped is None:
            continue
        label, ignore = mapped
        try:
            box = BoundingBox(child['x0'], child['y0'], child['x1'], child['y1']).clipped(width, height)
        except (KeyError, InvalidGeometry):
            box = None
        if box is None:
            logger.debug('degenerate ECP box dropped', extra={'identity': child.get('identity')})
            continue
        annotations.append(ObjectAnnotation(label, box, occlusion_fraction(child.get('tags', ())), ignore))
    return tuple(annotations)


def parse_record(record: dict, image_id: str, image_path: str, domain: str,
                 scale: Optional[tuple[float, float]] = None) -> ImageSample:
    try:
        width, height = int(record['imagewidth']), int(record['imageheight'])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f'{image_id}: missing image size ({exc})') from exc
    annotations = parse_objects(record, width, height)
    if scale is not None:
        sx, sy = scale
        width, height = round(width * sx), round(height * sy)
        annotations = tuple(
            a for a in (_reclip(a, width, height) for a in rescale_annotations(annotations, sx, sy)) if a
        )
    return ImageSample(image_id, width, height, domain, annotations, image_path=image_path)


def _reclip(anno: ObjectAnnotation, width: int, height: int) -> Optional[ObjectAnnotation]:
    box = anno.box.clipped(width, height)
    return None if box is None else ObjectAnnotation(anno.label, box, anno.occlusion_fraction, anno.ignore)


def ingest_ecp(labels_dir: Union[str, Path], images_dir: Union[str, Path], domain: str,
               scale: Optional[tuple[float, float]] = None, out_dir: Union[str, Path, None] = None,
               limit: Optional[int] = None) -> DatasetManifest:
    """
    Walk ``labels_dir/<city>/<name>.json`` and pair each file with
    ``images_dir/<city>/<name>.png``.

    With ``scale`` the images are resized into ``out_dir/images`` so the
    manifest's sizes and boxes match the pixels it points at.
    """
    labels_dir, images_dir = Path(labels_dir), Path(images_dir)
    if scale is not None and out_dir is None:
        raise ConfigError('rescaled ingestion writes resized images and needs an output directory')
    files = sorted(labels_dir.glob('*/*.json'))
    if limit is not None:
        files = files[:limit]

    entries = []
    for path in files:
        city, name = path.parent.name, path.stem
        source_image = (images_dir / city / f'{name}.png').resolve()
        try:
            record = jsonl.read_json(path)
        except ValueError as exc:
            raise ManifestFormatError(f'malformed ECP annotation: {exc}', path=path) from exc
        sample = parse_record(record, name, str(source_image), domain, scale)
        if scale is not None:
            relative = f'images/{city}/{name}.png'
            resize_image(source_image, Path(out_dir) / relative, (sample.width, sample.height))
            sample = ImageSample(sample.image_id, sample.width, sample.height, domain, sample.annotations,
                                 image_path=relative)
        entries.append(sample)

    manifest = DatasetManifest(entries)
    logger.info('ECP annotations ingested', extra={'labels_dir': str(labels_dir), 'records': len(manifest),
                                                   'domain': domain, 'scale': scale})
    return manifest
