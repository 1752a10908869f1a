"""Reading and writing the line-delimited artifacts (manifests, dumps, reports, logs)."""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Union

from rest_framework import serializers

from .domain import DatasetManifest
from .exceptions import ManifestFormatError
from .serializers import (
    ArtifactMetaSerializer,
    CalibrationLabelSerializer,
    CurationRecordSerializer,
    DetectionRecordSerializer,
    LossReportSerializer,
    ManifestRecordSerializer,
)
from .utils import jsonl
from .utils.images import load_sample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _parse(path: PathLike, serializer_class) -> list:
    items = []
    try:
        for lineno, record in jsonl.read_records(path):
            serializer = serializer_class(data=record)
            try:
                serializer.is_valid(raise_exception=True)
                items.append(serializer.save())
            except serializers.ValidationError as exc:
                raise ManifestFormatError(str(exc.detail), path=path, line=lineno) from exc
    except OSError as exc:
        raise ManifestFormatError(f'cannot read: {exc}', path=path) from exc
    except ValueError as exc:
        if isinstance(exc, ManifestFormatError):
            raise
        raise ManifestFormatError(f'malformed JSON: {exc}', path=path) from exc
    return items


def _render(instances: Iterable, serializer_class) -> list[dict]:
    return [serializer_class(instance).data for instance in instances]


# ==========================================
# SIDECARS
# ==========================================

def meta_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.meta.json')


def write_meta(path: PathLike, kind: str, config_hash: Optional[str], records: int) -> None:
    payload = ArtifactMetaSerializer({'kind': kind, 'config_hash': config_hash, 'records': records}).data
    jsonl.write_json(meta_path(path), dict(payload))


def read_meta(path: PathLike) -> Optional[dict]:
    sidecar = meta_path(path)
    if not sidecar.exists():
        return None
    return jsonl.read_json(sidecar)


# ==========================================
# MANIFESTS
# ==========================================

def read_manifest(path: PathLike) -> DatasetManifest:
    try:
        return DatasetManifest(_parse(path, ManifestRecordSerializer))
    except ValueError as exc:
        if isinstance(exc, ManifestFormatError):
            raise
        raise ManifestFormatError(str(exc), path=path) from exc


def resolve_paths(manifest: DatasetManifest, root: PathLike) -> DatasetManifest:
    """Entries with relative image paths made absolute against ``root``."""
    root = Path(root).resolve()
    return DatasetManifest(
        replace(s, image_path=str(root / s.image_path))
        if s.image_path and not Path(s.image_path).is_absolute() else s
        for s in manifest
    )


def read_loaded_manifest(path: PathLike) -> DatasetManifest:
    """Manifest with pixels attached and image paths resolved against the manifest's directory."""
    manifest = resolve_paths(read_manifest(path), Path(path).parent)
    return DatasetManifest(load_sample(sample) for sample in manifest)


def write_manifest(manifest: DatasetManifest, path: PathLike, config_hash: Optional[str] = None) -> None:
    count = jsonl.write_records(path, _render(manifest, ManifestRecordSerializer))
    write_meta(path, 'manifest', config_hash, count)
    logger.info('manifest written', extra={'path': str(path), 'records': count, **manifest.domain_counts})


# ==========================================
# DETECTIONS, CURATION REPORTS, TRAINING LOGS
# ==========================================

def read_detections(path: PathLike) -> list:
    return _parse(path, DetectionRecordSerializer)


def write_detections(detections: Iterable, path: PathLike, config_hash: Optional[str] = None) -> None:
    count = jsonl.write_records(path, _render(detections, DetectionRecordSerializer))
    write_meta(path, 'detections', config_hash, count)


def read_curation_report(path: PathLike) -> list:
    return _parse(path, CurationRecordSerializer)


def write_curation_report(records: Iterable, path: PathLike, config_hash: Optional[str] = None) -> None:
    count = jsonl.write_records(path, _render(records, CurationRecordSerializer))
    write_meta(path, 'curation_report', config_hash, count)


def read_training_log(path: PathLike) -> list:
    return _parse(path, LossReportSerializer)


def render_loss_report(report) -> dict:
    return LossReportSerializer(report).data


def append_loss_report(report, path: PathLike) -> None:
    jsonl.append_record(path, render_loss_report(report))


def read_calibration_labels(path: PathLike) -> dict[str, str]:
    return dict(_parse(path, CalibrationLabelSerializer))
