"""Detection and image-quality metrics: LAMR over FPPI, FID, sliced Wasserstein."""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.stats
import torch

from .domain import AnnotationSet, BoundingBox, ObjectAnnotation, iou
from .encoder import pooled_features
from .exceptions import (ConfigError, DuplicateDetectionError, InsufficientDataError, InvalidGeometry,
                         NumericalInstabilityError, UndefinedMetricError)
from .utils import jsonl
from .utils.images import sample_tensor

logger = logging.getLogger(__name__)

MISS_RATE_FLOOR = 1e-10
REPORT_DECIMALS = 6


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise InvalidGeometry(f'{self.image_id}: detection score {self.score} outside [0, 1]')

    def sort_key(self):
        return (-self.score, self.image_id, self.box.as_tuple())


# ==========================================
# SUBSETS
# ==========================================

@dataclass(frozen=True)
class SubsetSpec:
    """Half-open bounds: min <= value < max."""
    name: str
    min_height: float = 0.0
    max_height: float = math.inf
    min_occlusion: float = 0.0
    max_occlusion: float = math.inf

    def __post_init__(self):
        if not (self.min_height < self.max_height and self.min_occlusion < self.max_occlusion):
            raise ConfigError(f'subset {self.name}: bounds must satisfy min < max')

    def contains(self, anno: ObjectAnnotation) -> bool:
        h = anno.box.height
        return (self.min_height <= h < self.max_height
                and self.min_occlusion <= anno.occlusion_fraction < self.max_occlusion)


# Conventional pedestrian-benchmark bounds; override through config if needed.
DEFAULT_SUBSETS = {
    'Reasonable': SubsetSpec('Reasonable', min_height=40, max_occlusion=0.4),
    'Small': SubsetSpec('Small', min_height=30, max_height=60, max_occlusion=0.4),
    'Heavy': SubsetSpec('Heavy', min_height=40, min_occlusion=0.4, max_occlusion=0.8),
    'All': SubsetSpec('All', min_height=20, max_occlusion=0.8),
}


@dataclass(frozen=True)
class SubsetPartition:
    evaluable: AnnotationSet
    ignored: AnnotationSet


def subset_filter(annos: Iterable[ObjectAnnotation], spec: SubsetSpec) -> SubsetPartition:
    """Pedestrians inside the bounds stay evaluable; everything else becomes an ignore region."""
    evaluable, ignored = [], []
    for anno in annos:
        if anno.is_pedestrian and not anno.ignore and spec.contains(anno):
            evaluable.append(anno)
        else:
            ignored.append(anno if anno.ignore else replace(anno, ignore=True))
    return SubsetPartition(tuple(evaluable), tuple(ignored))


# ==========================================
# MATCHING
# ==========================================

@dataclass(frozen=True)
class MatchResult:
    tp: tuple[Detection, ...]
    fp: tuple[Detection, ...]
    ignored: tuple[Detection, ...]
    fn: tuple[ObjectAnnotation, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


def _check_duplicates(dets: Sequence[Detection]) -> None:
    seen = set()
    for d in dets:
        key = (d.image_id, d.box.as_tuple(), d.score)
        if key in seen:
            raise DuplicateDetectionError(f'duplicate detection {key}')
        seen.add(key)


def _greedy(dets: Sequence[Detection], gts: Sequence[ObjectAnnotation],
            iou_threshold: float) -> tuple[list[str], list[bool]]:
    """(status per detection, matched flag per non-ignore ground truth).

    Detections are taken in the given order; statuses are 'tp', 'fp' or 'ignored'.
    A detection goes to the unmatched ground truth with the highest IoU at or
    above the threshold; equal IoUs go to the earliest ground truth.
    """
    evaluable = [g for g in gts if not g.ignore]
    ignore_regions = [g for g in gts if g.ignore]
    taken = [False] * len(evaluable)
    statuses = []
    for det in dets:
        best, best_iou = -1, -1.0
        for k, gt in enumerate(evaluable):
            if taken[k]:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= iou_threshold and overlap > best_iou:
                best, best_iou = k, overlap
        if best >= 0:
            taken[best] = True
            statuses.append('tp')
        elif any(iou(det.box, g.box) >= iou_threshold for g in ignore_regions):
            statuses.append('ignored')
        else:
            statuses.append('fp')
    return statuses, taken


def match_detections(dets: Sequence[Detection], gts: AnnotationSet, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-image matching in descending score order (ties: image id, then box)."""
    _check_duplicates(dets)
    ordered = sorted(dets, key=Detection.sort_key)
    statuses, taken = _greedy(ordered, gts, iou_threshold)
    buckets = {'tp': [], 'fp': [], 'ignored': []}
    for det, status in zip(ordered, statuses):
        buckets[status].append(det)
    fn = tuple(g for g, hit in zip((g for g in gts if not g.ignore), taken) if not hit)
    return MatchResult(tuple(buckets['tp']), tuple(buckets['fp']), tuple(buckets['ignored']), fn)


# ==========================================
# LAMR
# ==========================================

@dataclass(frozen=True)
class EvalCurve:
    subset: str
    fppi: tuple[float, ...]
    miss_rate: tuple[float, ...]
    reference_fppi: tuple[float, ...]
    sampled_miss_rate: tuple[float, ...]
    lamr: float
    num_images: int
    num_ground_truth: int


def reference_grid(fppi_min: float = 1e-2, fppi_max: float = 1.0, points: int = 9) -> np.ndarray:
    return np.logspace(math.log10(fppi_min), math.log10(fppi_max), points)


def lamr(all_dets: Sequence[Detection], all_gts: Mapping[str, AnnotationSet], subset: SubsetSpec,
         iou_threshold: float = 0.5, fppi_grid: Optional[Sequence[float]] = None) -> EvalCurve:
    """
    Log-average miss rate over the evaluation images in ``all_gts``.

    Each score threshold admits a prefix of the globally score-sorted
    detections; since greedy matching processes detections in that order,
    one matching pass yields the confusion counts of every threshold.
    """
    _check_duplicates(all_dets)
    grid = np.asarray(fppi_grid if fppi_grid is not None else reference_grid(), dtype=np.float64)
    num_images = len(all_gts)
    if num_images == 0:
        raise UndefinedMetricError(f'{subset.name}: no evaluation images')

    per_image: dict[str, list[Detection]] = {image_id: [] for image_id in all_gts}
    for det in all_dets:
        if det.image_id in per_image:
            per_image[det.image_id].append(det)

    num_gt = 0
    scored: list[tuple[tuple, str]] = []
    for image_id, gts in all_gts.items():
        partition = subset_filter(gts, subset)
        num_gt += len(partition.evaluable)
        ordered = sorted(per_image[image_id], key=Detection.sort_key)
        statuses, _ = _greedy(ordered, (*partition.evaluable, *partition.ignored), iou_threshold)
        scored.extend((det.sort_key(), status) for det, status in zip(ordered, statuses))
    if num_gt == 0:
        raise UndefinedMetricError(f'{subset.name}: no evaluable ground truth')

    scored.sort(key=lambda item: item[0])
    fppi, miss = [0.0], [1.0]
    tp = fp = 0
    for index, (key, status) in enumerate(scored):
        tp += status == 'tp'
        fp += status == 'fp'
        last_of_score = index + 1 == len(scored) or scored[index + 1][0][0] != key[0]
        if last_of_score:
            fppi.append(fp / num_images)
            miss.append(1.0 - tp / num_gt)

    fppi_arr, miss_arr = np.array(fppi), np.array(miss)
    sampled = []
    for ref in grid:
        admissible = np.nonzero(fppi_arr <= ref)[0]
        sampled.append(float(miss_arr[admissible[-1]]) if admissible.size else 1.0)
    value = float(np.exp(np.mean(np.log(np.maximum(sampled, MISS_RATE_FLOOR)))))
    return EvalCurve(subset.name, tuple(fppi), tuple(miss), tuple(grid.tolist()), tuple(sampled),
                     value, num_images, num_gt)


def evaluate_subsets(all_dets: Sequence[Detection], all_gts: Mapping[str, AnnotationSet],
                     subset_names: Sequence[str], iou_threshold: float = 0.5,
                     fppi_grid: Optional[Sequence[float]] = None) -> list[EvalCurve]:
    """One curve per named subset; subsets without evaluable ground truth are skipped with a warning."""
    curves = []
    for name in subset_names:
        try:
            spec = DEFAULT_SUBSETS[name]
        except KeyError as exc:
            raise UndefinedMetricError(f'unknown subset {name!r}; known: {sorted(DEFAULT_SUBSETS)}') from exc
        try:
            curves.append(lamr(all_dets, all_gts, spec, iou_threshold=iou_threshold, fppi_grid=fppi_grid))
        except UndefinedMetricError as exc:
            logger.warning('subset skipped', extra={'subset': name, 'reason': str(exc)})
    return curves


# ==========================================
# FEATURE STATISTICS
# ==========================================

@dataclass(frozen=True)
class FeatureGaussian:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def extract_features(encoder, samples: Sequence, cache=None, batch_size: int = 8) -> np.ndarray:
    """n × C matrix of mean-pooled last-layer patch embeddings, one row per loaded sample."""
    rows = []
    with torch.no_grad():
        if cache is not None:
            rows = [cache.pooled(encoder, s.image_id, sample_tensor(s)) for s in samples]
        else:
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                rows.extend(pooled_features(encoder, torch.cat([sample_tensor(s) for s in chunk])))
    if not rows:
        raise UndefinedMetricError('no samples to extract features from')
    return torch.stack(rows).to(torch.float64).numpy()


def fit_gaussian(features) -> FeatureGaussian:
    """Sample mean and unbiased covariance; symmetrized, negative eigenvalues clamped to 0."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise UndefinedMetricError(f'expected an n×d feature matrix, got shape {x.shape}')
    if x.shape[0] < 2:
        raise InsufficientDataError(required=2, available=x.shape[0])
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    cov = (cov + cov.T) / 2.0
    eigvals, eigvecs = scipy.linalg.eigh(cov)
    if eigvals.min() < 0:
        cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
        cov = (cov + cov.T) / 2.0
    return FeatureGaussian(mu, cov, x.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = scipy.linalg.eigh((matrix + matrix.T) / 2.0)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(g1: FeatureGaussian, g2: FeatureGaussian) -> float:
    """
    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    Tr (S1 S2)^(1/2) is taken from the eigenvalues of the symmetric
    S1^(1/2) S2 S1^(1/2), which shares its spectrum with S1 S2.
    """
    if g1.dim != g2.dim:
        raise UndefinedMetricError(f'feature dimensions differ: {g1.dim} vs {g2.dim}')
    product = g1.cov @ g2.cov
    spectrum = scipy.linalg.eigvals(product)
    scale = max(1.0, float(np.abs(spectrum.real).max(initial=0.0)))
    if np.abs(spectrum.imag).max(initial=0.0) > 1e-6 * scale:
        raise NumericalInstabilityError('covariance product has a significant imaginary spectrum')

    root = _psd_sqrt(g1.cov)
    middle = root @ g2.cov @ root
    eig = scipy.linalg.eigvalsh((middle + middle.T) / 2.0)
    trace_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = g1.mean - g2.mean
    value = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def random_projections(dim: int, num_projections: int, seed: int) -> np.ndarray:
    """num_projections × dim unit vectors from a seeded Gaussian."""
    directions = np.random.default_rng(seed).normal(size=(num_projections, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def wasserstein_distance(features_a, features_b, num_projections: int = 128, seed: int = 0,
                         projections: Optional[np.ndarray] = None) -> float:
    """Sliced 1-Wasserstein distance between two empirical feature sets."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise UndefinedMetricError('sliced Wasserstein distance needs non-empty feature sets')
    if a.shape[1] != b.shape[1]:
        raise UndefinedMetricError(f'feature dimensions differ: {a.shape[1]} vs {b.shape[1]}')
    if projections is None:
        projections = random_projections(a.shape[1], num_projections, seed)
    pa, pb = a @ projections.T, b @ projections.T
    distances = [scipy.stats.wasserstein_distance(pa[:, k], pb[:, k]) for k in range(projections.shape[0])]
    return float(np.mean(distances))


# ==========================================
# REPORT
# ==========================================

PathLike = Union[str, Path]


def load_reference_table(path: PathLike) -> dict:
    return jsonl.read_json(path)


@dataclass(frozen=True)
class ReferenceSelection:
    """Which published row a measurement is compared against."""
    translator: str = 'pipeline'
    detector: str = 'pedestron'
    ratio: Optional[float] = 0.0


def reference_row(table: Mapping, detector: str, translator: str, ratio: Optional[float]) -> Optional[dict]:
    rows = table.get('detection', {}).get(detector, {})
    row = rows.get(translator)
    if row is None:
        return None
    if ratio is not None and all(isinstance(v, dict) for v in row.values()):
        return row.get(str(int(round(ratio * 100))))
    return row


def _entry(value: Optional[float], reference: Optional[float]) -> dict:
    value = None if value is None else round(float(value), REPORT_DECIMALS)
    delta = None
    if value is not None and reference is not None:
        delta = round(value - float(reference), REPORT_DECIMALS)
    return {'delta': delta, 'reference': reference, 'value': value}


def emit_report(curves: Sequence[EvalCurve], fid: Optional[float], wd: Optional[float],
                reference_table: Optional[Mapping], path: Optional[PathLike] = None,
                config_hash: Optional[str] = None, extractor: Optional[str] = None,
                commensurate: bool = False, selection: Optional[ReferenceSelection] = None) -> dict:
    """
    Render measured metrics beside the published references.

    LAMR values are reported in percent. Deltas are measured minus reference.
    The ``lamr`` section is omitted when no curves are given.
    """
    table = reference_table or {}
    selection = selection or ReferenceSelection()
    quality = table.get('image_quality', {}).get(selection.translator, {})

    report = {
        'header': {'commensurate': bool(commensurate), 'config_hash': config_hash, 'extractor': extractor},
        'metrics': {
            'fid': _entry(fid, quality.get('fid')),
            'wd': _entry(wd, quality.get('wd')),
        },
    }
    if curves:
        row = reference_row(table, selection.detector, selection.translator, selection.ratio) or {}
        report['lamr'] = {
            curve.subset: _entry(100.0 * curve.lamr, row.get(curve.subset))
            for curve in curves
        }
        report['selection'] = {'detector': selection.detector, 'ratio': selection.ratio,
                               'translator': selection.translator}
    if path is not None:
        jsonl.write_json(path, report)
        logger.info('evaluation report written', extra={'path': str(path), 'config_hash': config_hash})
    return report
