"""Two-stage curation of translated images.

Stage 1 keeps a translation when its pooled semantic features stay close to
the source image (centered cosine >= threshold). Stage 2 crops every
inherited pedestrian box and drops the image if any crop is classified as
background.
"""
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .domain import BoundingBox, DatasetManifest, ImageSample, rectangles_intersect
from .encoder import SemanticEncoder, pooled_features
from .exceptions import CalibrationError, CurationError, InvalidGeometry
from .utils.images import load_sample, sample_tensor

logger = logging.getLogger(__name__)

ACCEPTED = 'accepted'
REJECTED = 'rejected'

KEPT = 'kept'
QUARANTINED = 'quarantined'

# rejection / quarantine reasons
BELOW_THRESHOLD = 'below_fidelity_threshold'
PEDESTRIAN_LOST = 'pedestrian_not_preserved'
ENCODER_FAILURE = 'encoder_failure'
CLASSIFIER_FAILURE = 'classifier_failure'
SOURCE_NOT_FOUND = 'source_not_found'

CENTER_EPS = 1e-12


# ==========================================
# STAGE 1: FIDELITY
# ==========================================

@dataclass(frozen=True)
class FidelityScore:
    source_image_id: str
    image_id: str
    value: float


def centered_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the channel-centered vectors; falls back to the plain cosine
    when either centered vector vanishes (constant descriptors)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca, cb = a - a.mean(), b - b.mean()
    if np.linalg.norm(ca) < CENTER_EPS or np.linalg.norm(cb) < CENTER_EPS:
        ca, cb = a, b
    na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
    if na < CENTER_EPS or nb < CENTER_EPS:
        return 1.0 if na < CENTER_EPS and nb < CENTER_EPS else 0.0
    return float(np.clip(ca @ cb / (na * nb), -1.0, 1.0))


def fidelity_score(encoder: SemanticEncoder, x_S: torch.Tensor, x_hat: torch.Tensor,
                   source_image_id: str = 'source', image_id: str = 'translated') -> FidelityScore:
    try:
        with torch.no_grad():
            a = pooled_features(encoder, x_S)[0].cpu().numpy()
            b = pooled_features(encoder, x_hat)[0].cpu().numpy()
    except Exception as exc:
        raise CurationError(image_id, exc) from exc
    return FidelityScore(source_image_id, image_id, centered_cosine(a, b))


@dataclass(frozen=True)
class CalibrationSet:
    """(score, label) pairs with labels 'accepted' or 'rejected'."""
    pairs: tuple[tuple[float, str], ...]

    def __post_init__(self):
        pairs = tuple((float(s.value if isinstance(s, FidelityScore) else s), label) for s, label in self.pairs)
        for score, label in pairs:
            if label not in (ACCEPTED, REJECTED):
                raise CalibrationError(f'unknown calibration label {label!r}')
            if not math.isfinite(score):
                raise CalibrationError('calibration scores must be finite')
        object.__setattr__(self, 'pairs', pairs)

    def __len__(self):
        return len(self.pairs)

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for s, _ in self.pairs], dtype=np.float64)

    @property
    def accepted(self) -> np.ndarray:
        return np.array([label == ACCEPTED for _, label in self.pairs], dtype=bool)


def f1_at(scores: np.ndarray, accepted: np.ndarray, threshold: float) -> float:
    """F1 of the rule score >= threshold against the accepted labels."""
    predicted = scores >= threshold
    tp = int(np.sum(predicted & accepted))
    denom = int(predicted.sum()) + int(accepted.sum())
    return 2.0 * tp / denom if denom else 0.0


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.unique(np.concatenate([distinct[:1], midpoints, distinct[-1:]]))


def calibrate_threshold(calibration: CalibrationSet) -> float:
    """The candidate threshold with the best F1; ties go to the higher (stricter) one."""
    if len(calibration) == 0:
        raise CalibrationError('empty calibration set')
    accepted = calibration.accepted
    if accepted.all() or not accepted.any():
        raise CalibrationError('calibration set needs both accepted and rejected pairs')
    scores = calibration.scores
    best_threshold, best_f1 = None, -1.0
    for threshold in candidate_thresholds(scores):
        f1 = f1_at(scores, accepted, threshold)
        if f1 >= best_f1:
            best_threshold, best_f1 = float(threshold), f1
    logger.info('threshold calibrated', extra={'threshold': best_threshold, 'f1': best_f1,
                                               'pairs': len(calibration)})
    return best_threshold


@dataclass(frozen=True)
class Stage1Partition:
    kept: tuple[FidelityScore, ...]
    discarded: tuple[FidelityScore, ...]


def stage1_gate(scores: Sequence[FidelityScore], threshold: float) -> Stage1Partition:
    kept, discarded = [], []
    for score in scores:
        (kept if score.value >= threshold else discarded).append(score)
    return Stage1Partition(tuple(kept), tuple(discarded))


# ==========================================
# STAGE 2: PEDESTRIAN PRESERVATION
# ==========================================

@dataclass(frozen=True)
class MinedCrops:
    boxes: tuple[BoundingBox, ...]
    attempts: int
    exhausted: bool = False


def mine_negative_crops(sample: ImageSample, crop_size: tuple[int, int], count: int,
                        rng: np.random.Generator, attempt_budget: int = 10000) -> MinedCrops:
    """
    Rejection-sample ``count`` crop_size=(width, height) boxes that do not
    intersect any pedestrian box. Stops early with ``exhausted`` set once
    ``attempt_budget`` draws have been made.
    """
    cw, ch = crop_size
    if cw > sample.width or ch > sample.height:
        raise InvalidGeometry(f'{sample.image_id}: crop {cw}x{ch} larger than image {sample.width}x{sample.height}')
    pedestrians = [a.box for a in sample.annotations if a.is_pedestrian]
    crops, attempts = [], 0
    while len(crops) < count and attempts < attempt_budget:
        attempts += 1
        x0 = int(rng.integers(0, sample.width - cw + 1))
        y0 = int(rng.integers(0, sample.height - ch + 1))
        crop = BoundingBox(x0, y0, x0 + cw, y0 + ch)
        if not any(rectangles_intersect(crop, box) for box in pedestrians):
            crops.append(crop)
    exhausted = len(crops) < count
    if exhausted:
        logger.warning('negative crop budget exhausted',
                       extra={'image_id': sample.image_id, 'found': len(crops), 'wanted': count})
    return MinedCrops(tuple(crops), attempts, exhausted)


def extract_crop(pixels: np.ndarray, box: BoundingBox, size: tuple[int, int]) -> torch.Tensor:
    """C×h×w crop of an H×W×C image; out-of-frame pixels replicate the edge.

    ``size`` is (height, width) of the classifier input.
    """
    height, width = pixels.shape[:2]
    x0, y0 = math.floor(box.x0), math.floor(box.y0)
    x1, y1 = max(math.ceil(box.x1), x0 + 1), max(math.ceil(box.y1), y0 + 1)
    pad = (max(0, -y0), max(0, y1 - height)), (max(0, -x0), max(0, x1 - width)), (0, 0)
    padded = np.pad(pixels, pad, mode='edge')
    oy, ox = pad[0][0], pad[1][0]
    patch = padded[y0 + oy:y1 + oy, x0 + ox:x1 + ox]
    tensor = torch.as_tensor(np.ascontiguousarray(patch), dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
    if tuple(tensor.shape[-2:]) != tuple(size):
        tensor = F.interpolate(tensor, size=size, mode='bilinear', align_corners=False)
    return tensor[0]


class PatchClassifier(ABC):
    """Pedestrian vs background on fixed-size crops."""
    input_size: tuple[int, int] = (16, 8)

    @abstractmethod
    def pedestrian_probability(self, crops: torch.Tensor) -> torch.Tensor:
        """N×C×h×w crops -> N probabilities of 'pedestrian'."""


@dataclass(frozen=True)
class PatchVerdict:
    box: BoundingBox
    label: str
    confidence: float


@dataclass(frozen=True)
class Stage2Result:
    kept: bool
    verdicts: tuple[PatchVerdict, ...]


def stage2_gate(classifier: PatchClassifier, sample: ImageSample, decision: float = 0.5) -> Stage2Result:
    """Classify a crop per inherited pedestrian box; one background verdict discards the image."""
    boxes = [a.box for a in sample.pedestrians]
    if not boxes:
        return Stage2Result(True, ())
    try:
        crops = torch.stack([extract_crop(sample.pixels, box, classifier.input_size) for box in boxes])
        with torch.no_grad():
            probs = classifier.pedestrian_probability(crops).detach().cpu().to(torch.float64).reshape(-1)
        if probs.numel() != len(boxes) or not torch.isfinite(probs).all():
            raise ValueError(f'classifier returned {probs.numel()} scores for {len(boxes)} crops')
    except Exception as exc:
        raise CurationError(sample.image_id, exc) from exc

    verdicts = []
    for box, p in zip(boxes, probs.tolist()):
        if p >= decision:
            verdicts.append(PatchVerdict(box, 'pedestrian', p))
        else:
            verdicts.append(PatchVerdict(box, 'background', 1.0 - p))
    return Stage2Result(all(v.label == 'pedestrian' for v in verdicts), tuple(verdicts))


# ==========================================
# PIPELINE
# ==========================================

@dataclass(frozen=True)
class CurationRecord:
    image_id: str
    stage1_score: Optional[float] = None
    stage1_pass: Optional[bool] = None
    stage2_verdicts: tuple[PatchVerdict, ...] = ()
    final_status: str = KEPT
    reason: Optional[str] = None


@dataclass(frozen=True)
class CurationReport:
    records: tuple[CurationRecord, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.records)

    def by_status(self, status: str) -> list[str]:
        return [r.image_id for r in self.records if r.final_status == status]

    @property
    def stage2_evaluations(self) -> int:
        return sum(1 for r in self.records if r.stage1_pass)

    @property
    def counts(self) -> dict[str, int]:
        counts = {KEPT: 0, REJECTED: 0, QUARANTINED: 0}
        for r in self.records:
            counts[r.final_status] += 1
        return counts


def _curate_one(entry: ImageSample, sources: DatasetManifest, encoder: SemanticEncoder,
                classifier: PatchClassifier, threshold: float,
                root: Optional[Path]) -> CurationRecord:
    source = sources.get(entry.source_image_id) if entry.source_image_id else None
    if source is None:
        return CurationRecord(entry.image_id, final_status=QUARANTINED, reason=SOURCE_NOT_FOUND)

    try:
        synthetic = load_sample(entry, root)
        source = load_sample(source, root)
        score = fidelity_score(encoder, sample_tensor(source), sample_tensor(synthetic),
                               source.image_id, entry.image_id)
    except (CurationError, OSError, ValueError) as exc:
        logger.warning('fidelity scoring failed', extra={'image_id': entry.image_id, 'error': str(exc)})
        return CurationRecord(entry.image_id, final_status=QUARANTINED, reason=ENCODER_FAILURE)

    if not stage1_gate([score], threshold).kept:
        return CurationRecord(entry.image_id, score.value, False, final_status=REJECTED, reason=BELOW_THRESHOLD)

    try:
        result = stage2_gate(classifier, synthetic)
    except CurationError as exc:
        logger.warning('patch classification failed', extra={'image_id': entry.image_id, 'error': str(exc)})
        return CurationRecord(entry.image_id, score.value, True, final_status=QUARANTINED, reason=CLASSIFIER_FAILURE)

    if not result.kept:
        return CurationRecord(entry.image_id, score.value, True, result.verdicts, REJECTED, PEDESTRIAN_LOST)
    return CurationRecord(entry.image_id, score.value, True, result.verdicts, KEPT, None)


def curate(
    pool: DatasetManifest,
    sources: DatasetManifest,
    encoder: SemanticEncoder,
    classifier: PatchClassifier,
    threshold: float,
    workers: int = 1,
    root: Union[str, Path, None] = None,
) -> tuple[DatasetManifest, CurationReport]:
    """
    Apply stage 1 then stage 2 to every synthetic image in ``pool``.

    Survivors keep their pool order; report records are sorted by image id.
    Stage 2 only runs on images that pass stage 1.
    """
    root = Path(root) if root is not None else None
    entries = list(pool)
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(
                lambda e: _curate_one(e, sources, encoder, classifier, threshold, root), entries))
    else:
        records = [_curate_one(e, sources, encoder, classifier, threshold, root) for e in entries]

    kept_ids = {r.image_id for r in records if r.final_status == KEPT}
    curated = DatasetManifest(e for e in entries if e.image_id in kept_ids)
    report = CurationReport(tuple(sorted(records, key=lambda r: r.image_id)))
    logger.info('curation finished', extra={'pool': len(entries), 'threshold': threshold, **report.counts})
    return curated, report
