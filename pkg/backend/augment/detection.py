"""Detector-guided consistency: CIoU, DFL and the dense detector contract."""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .domain import AnnotationSet, BoundingBox, ImageSample, ObjectAnnotation
from .exceptions import DetectorStateError, InvalidGeometry, LossInputError
from .utils.images import sample_tensor
from .utils.seeding import numpy_rng

logger = logging.getLogger(__name__)


def _box_tensor(box: Union[BoundingBox, torch.Tensor]) -> torch.Tensor:
    if isinstance(box, BoundingBox):
        return torch.tensor(box.as_tuple(), dtype=torch.float64)
    return box


def ciou_loss(pred: Union[BoundingBox, torch.Tensor], target: Union[BoundingBox, torch.Tensor]):
    """
    Complete-IoU loss on xyxy boxes (last axis of size 4).

        1 - IoU + rho^2 / c^2 + alpha * v
        v     = 4/pi^2 * (atan(w_t/h_t) - atan(w_p/h_p))^2
        alpha = v / ((1 - IoU) + v)

    alpha keeps its gradient. BoundingBox inputs return a float.
    """
    as_float = isinstance(pred, BoundingBox) and isinstance(target, BoundingBox)
    p, t = _box_tensor(pred), _box_tensor(target)
    if p.shape[-1] != 4 or t.shape[-1] != 4:
        raise LossInputError('ciou_loss expects boxes with 4 coordinates')

    px0, py0, px1, py1 = p.unbind(-1)
    tx0, ty0, tx1, ty1 = t.unbind(-1)
    w1, h1 = px1 - px0, py1 - py0
    w2, h2 = tx1 - tx0, ty1 - ty0
    if (w1 <= 0).any() or (h1 <= 0).any() or (w2 <= 0).any() or (h2 <= 0).any():
        raise InvalidGeometry('ciou_loss: degenerate box')

    inter = (torch.minimum(px1, tx1) - torch.maximum(px0, tx0)).clamp(min=0) * \
            (torch.minimum(py1, ty1) - torch.maximum(py0, ty0)).clamp(min=0)
    union = w1 * h1 + w2 * h2 - inter
    iou = inter / union

    cw = torch.maximum(px1, tx1) - torch.minimum(px0, tx0)
    ch = torch.maximum(py1, ty1) - torch.minimum(py0, ty0)
    c2 = cw ** 2 + ch ** 2
    rho2 = ((tx0 + tx1 - px0 - px1) ** 2 + (ty0 + ty1 - py0 - py1) ** 2) / 4

    v = (4 / math.pi ** 2) * (torch.atan(w2 / h2) - torch.atan(w1 / h1)) ** 2
    denom = (1 - iou) + v
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    alpha = torch.where(denom > 0, v / safe, torch.zeros_like(v))

    loss = 1 - iou + rho2 / c2 + alpha * v
    return float(loss) if as_float else loss


def dfl_loss(bin_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Distribution focal loss over K+1 bins for targets y in [0, K].

        -((y_{i+1} - y) log p_i + (y - y_i) log p_{i+1}),  y_i = floor(y)

    Returns one value per target (same shape as ``target``).
    """
    target = torch.as_tensor(target, dtype=bin_logits.dtype, device=bin_logits.device)
    K = bin_logits.shape[-1] - 1
    if K < 1:
        raise LossInputError('dfl_loss needs at least two bins')
    if bin_logits.shape[:-1] != target.shape:
        raise LossInputError(f'dfl_loss: logits {tuple(bin_logits.shape)} vs targets {tuple(target.shape)}')
    if (target < 0).any() or (target > K).any():
        raise LossInputError(f'dfl_loss: targets must lie in [0, {K}]')

    left = target.detach().floor().long().clamp(max=K - 1)
    right = left + 1
    w_left = right.to(target.dtype) - target
    w_right = target - left.to(target.dtype)

    log_p = F.log_softmax(bin_logits, dim=-1)
    lp_left = log_p.gather(-1, left.unsqueeze(-1)).squeeze(-1)
    lp_right = log_p.gather(-1, right.unsqueeze(-1)).squeeze(-1)
    zero = torch.zeros_like(target)
    return -(torch.where(w_left > 0, w_left * lp_left, zero) + torch.where(w_right > 0, w_right * lp_right, zero))


# ==========================================
# DETECTOR CONTRACT
# ==========================================

@dataclass(frozen=True)
class DensePredictions:
    """Pre-NMS outputs on a stride-``stride`` grid.

    obj_logits, cls_logits: B×H×W
    box_logits: B×H×W×4×(K+1), one bin distribution per side (l, t, r, b)
    """
    obj_logits: torch.Tensor
    cls_logits: torch.Tensor
    box_logits: torch.Tensor
    stride: int

    @property
    def reg_max(self) -> int:
        return self.box_logits.shape[-1] - 1

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.obj_logits.shape[-2:])

    def cell_centers(self) -> torch.Tensor:
        """H×W×2 (cx, cy) pixel centres."""
        h, w = self.grid
        ys = (torch.arange(h, dtype=self.box_logits.dtype) + 0.5) * self.stride
        xs = (torch.arange(w, dtype=self.box_logits.dtype) + 0.5) * self.stride
        gy, gx = torch.meshgrid(ys, xs, indexing='ij')
        return torch.stack([gx, gy], dim=-1)

    def decoded_boxes(self) -> torch.Tensor:
        """B×H×W×4 xyxy boxes from the expectation of each side distribution."""
        bins = torch.arange(self.reg_max + 1, dtype=self.box_logits.dtype)
        dist = (self.box_logits.softmax(dim=-1) * bins).sum(dim=-1) * self.stride
        centers = self.cell_centers().unsqueeze(0)
        return torch.cat([centers - dist[..., :2], centers + dist[..., 2:]], dim=-1)

    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.obj_logits) * torch.sigmoid(self.cls_logits)


@dataclass(frozen=True)
class DetectionLossComponents:
    box: torch.Tensor
    cls: torch.Tensor
    dfl: torch.Tensor

    def weighted(self, weights) -> torch.Tensor:
        return weights.box * self.box + weights.cls * self.cls + weights.dfl * self.dfl

    def as_floats(self) -> dict[str, float]:
        return {'box': float(self.box), 'cls': float(self.cls), 'dfl': float(self.dfl)}


class DetectorHead(nn.Module, ABC):
    """Adapter contract for a dense, NMS-free-during-training detector."""
    detector_id: str = 'detector'

    @abstractmethod
    def dense_forward(self, images: torch.Tensor) -> DensePredictions:
        ...

    @abstractmethod
    def component_losses(self, preds: DensePredictions,
                         targets: Sequence[AnnotationSet]) -> DetectionLossComponents:
        ...

    @abstractmethod
    def decode(self, preds: DensePredictions, image_ids: Sequence[str], image_size: tuple[int, int],
               score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[list]:
        ...

    def head_parameters(self) -> list[nn.Parameter]:
        return list(self.parameters())

    def freeze(self) -> 'DetectorHead':
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def detector_consistency_loss(detector: DetectorHead, x_hat: torch.Tensor,
                              Y_S: Union[AnnotationSet, Sequence[AnnotationSet]], weights,
                              return_components: bool = False):
    """
    L_det = w.box * L_box + w.cls * L_cls + w.dfl * L_dfl on the translated batch.

    ``Y_S`` is the inherited annotation set (or one per image in the batch).
    Gradients reach ``x_hat`` through the frozen detector.
    """
    if not detector.frozen:
        raise DetectorStateError(f'{detector.detector_id}: guidance detector must be frozen')
    if len(Y_S) == 0 or isinstance(Y_S[0], ObjectAnnotation):
        targets = [tuple(Y_S)]
    else:
        targets = [tuple(t) for t in Y_S]
    if len(targets) != x_hat.shape[0]:
        raise LossInputError(f'{len(targets)} target sets for a batch of {x_hat.shape[0]} images')
    components = detector.component_losses(detector.dense_forward(x_hat), targets)
    total = components.weighted(weights)
    return (total, components) if return_components else total


# ==========================================
# TRAINING (toy detectors and offline fine-tuning)
# ==========================================

def _batch(samples: Sequence[ImageSample], dtype=torch.float32) -> tuple[torch.Tensor, list[AnnotationSet]]:
    images = torch.cat([sample_tensor(s, dtype=dtype) for s in samples], dim=0)
    return images, [s.annotations for s in samples]


def fit_detector(
    detector: DetectorHead,
    samples: Sequence[ImageSample],
    weights,
    stages: Sequence[int] = (150, 150),
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
    progress: bool = False,
) -> DetectorHead:
    """
    Staged fine-tuning with SGD (momentum 0.9, weight decay 1e-4).

    ``stages`` lists step counts: the first stage trains only the head, each
    later stage trains every parameter. Returns the detector frozen.
    """
    if not samples:
        raise LossInputError('fit_detector needs at least one training sample')
    rng: np.random.Generator = numpy_rng(seed, 'fit_detector')
    head_ids = {id(p) for p in detector.head_parameters()}
    detector.train()

    for stage_index, steps in enumerate(stages):
        for p in detector.parameters():
            p.requires_grad_(stage_index > 0 or id(p) in head_ids)
        params = [p for p in detector.parameters() if p.requires_grad]
        if not steps or not params:
            continue
        optimizer = torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=1e-4)
        for _ in tqdm(range(steps), desc=f'detector stage {stage_index + 1}', disable=not progress):
            picks = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
            images, targets = _batch([samples[i] for i in sorted(picks)])
            loss = detector.component_losses(detector.dense_forward(images), targets).weighted(weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        logger.info('detector stage finished',
                    extra={'detector': detector.detector_id, 'stage': stage_index + 1,
                           'steps': steps, 'loss': float(loss)})
    return detector.freeze()


def detect(detector: DetectorHead, samples: Sequence[ImageSample], score_threshold: float = 0.05,
           batch_size: int = 8) -> list:
    """Run a detector over loaded samples and return a flat Detection list."""
    detections = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, _ = _batch(chunk)
            preds = detector.dense_forward(images)
            per_image = detector.decode(preds, [s.image_id for s in chunk], tuple(images.shape[-2:]),
                                        score_threshold=score_threshold)
            for dets in per_image:
                detections.extend(dets)
    return detections


@dataclass(frozen=True)
class DetectionWeights:
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5


DEFAULT_DETECTION_WEIGHTS = DetectionWeights()


def annotation_targets(annotations: AnnotationSet) -> tuple[list[BoundingBox], list[BoundingBox]]:
    """(positives, ignore regions) for dense assignment."""
    positives, ignored = [], []
    for anno in annotations:
        (positives if anno.is_pedestrian and not anno.ignore else ignored).append(anno.box)
    return positives, ignored


def boxes_to_tensor(boxes: Sequence[BoundingBox], dtype=torch.float32) -> Optional[torch.Tensor]:
    if not boxes:
        return None
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)
