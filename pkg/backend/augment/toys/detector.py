"""Single-scale anchor-free dense detector for toy scenes.

Assignment rule (component_losses):
  * each non-ignored pedestrian box is assigned to the grid cell containing
    its centre; when two boxes share a cell the smaller one wins;
  * every other cell is a background cell, except cells whose centre lies
    inside an ignore region (ignored annotations and non-pedestrian labels),
    which contribute nothing;
  * L_cls  = mean BCE of objectness over contributing cells
             + mean BCE of the pedestrian logit over positive cells;
  * L_box  = mean CIoU between the decoded box and the ground truth box
             over positive cells;
  * L_dfl  = mean DFL over the four side distances (in stride units,
             clamped to [0, K]) of positive cells.
"""
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms

from ..detection import (DensePredictions, DetectionLossComponents, DetectorHead, annotation_targets, ciou_loss,
                         dfl_loss)
from ..domain import AnnotationSet, BoundingBox, PEDESTRIAN


class ToyDenseDetector(DetectorHead):
    detector_id = 'toy-dense'

    def __init__(self, reg_max: int = 8, stride: int = 4, width: int = 16, seed: int = 0):
        super().__init__()
        if stride != 4:
            raise ValueError('the toy detector body downsamples by exactly 4')
        self.reg_max = reg_max
        self.stride = stride
        g = torch.Generator().manual_seed(seed)
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Conv2d(2 * width, 2 + 4 * (reg_max + 1), 1)
        with torch.no_grad():
            for module in (*self.body, self.head):
                if isinstance(module, nn.Conv2d):
                    fan_in = module.weight[0].numel()
                    module.weight.copy_(torch.randn(module.weight.shape, generator=g) / fan_in ** 0.5)
                    module.bias.zero_()
            # background prior
            self.head.bias[0] = -4.0

    def head_parameters(self):
        return list(self.head.parameters())

    def dense_forward(self, images: torch.Tensor) -> DensePredictions:
        out = self.head(self.body(images.to(self.head.weight.dtype)))
        b, _, h, w = out.shape
        box = out[:, 2:].reshape(b, 4, self.reg_max + 1, h, w).permute(0, 3, 4, 1, 2)
        return DensePredictions(obj_logits=out[:, 0], cls_logits=out[:, 1], box_logits=box, stride=self.stride)

    # ------------------------------------------------------------------
    # assignment
    # ------------------------------------------------------------------

    def _assign(self, preds: DensePredictions, annotations: AnnotationSet):
        """(obj target H×W, contributing mask H×W, [(i, j, gt box)] positives)."""
        h, w = preds.grid
        s = preds.stride
        positives, ignored = annotation_targets(annotations)
        dtype = preds.obj_logits.dtype
        target = torch.zeros(h, w, dtype=dtype)
        valid = torch.ones(h, w, dtype=torch.bool)

        centers = preds.cell_centers()
        for box in ignored:
            cx, cy = centers[..., 0], centers[..., 1]
            inside = (cx > box.x0) & (cx < box.x1) & (cy > box.y0) & (cy < box.y1)
            valid &= ~inside

        owner: dict[tuple[int, int], BoundingBox] = {}
        for box in sorted(positives, key=lambda b: b.area, reverse=True):
            cx, cy = box.center
            i = min(max(int(cy // s), 0), h - 1)
            j = min(max(int(cx // s), 0), w - 1)
            owner[(i, j)] = box
        for (i, j) in owner:
            target[i, j] = 1.0
            valid[i, j] = True
        return target, valid, sorted((i, j, box) for (i, j), box in owner.items())

    def component_losses(self, preds: DensePredictions,
                         targets: Sequence[AnnotationSet]) -> DetectionLossComponents:
        if len(targets) != preds.obj_logits.shape[0]:
            raise ValueError(f'{len(targets)} target sets for {preds.obj_logits.shape[0]} predictions')
        dtype = preds.obj_logits.dtype
        decoded = preds.decoded_boxes()
        centers = preds.cell_centers()
        s = preds.stride
        K = preds.reg_max

        obj_terms, cls_terms = [], []
        pred_boxes, gt_boxes, side_logits, side_targets = [], [], [], []
        for b, annotations in enumerate(targets):
            obj_target, valid, positives = self._assign(preds, annotations)
            bce = F.binary_cross_entropy_with_logits(preds.obj_logits[b], obj_target, reduction='none')
            obj_terms.append(bce[valid])
            for i, j, box in positives:
                cls_terms.append(F.binary_cross_entropy_with_logits(
                    preds.cls_logits[b, i, j], torch.ones((), dtype=dtype)))
                pred_boxes.append(decoded[b, i, j])
                gt_boxes.append(torch.tensor(box.as_tuple(), dtype=dtype))
                cx, cy = centers[i, j]
                sides = torch.stack([cx - box.x0, cy - box.y0, box.x1 - cx, box.y1 - cy]) / s
                side_targets.append(sides.clamp(0.0, float(K)))
                side_logits.append(preds.box_logits[b, i, j])

        zero = preds.obj_logits.sum() * 0.0
        obj = torch.cat(obj_terms).mean() if sum(t.numel() for t in obj_terms) else zero
        cls = obj + (torch.stack(cls_terms).mean() if cls_terms else zero)
        if pred_boxes:
            box_loss = ciou_loss(torch.stack(pred_boxes), torch.stack(gt_boxes)).mean()
            dfl = dfl_loss(torch.stack(side_logits), torch.stack(side_targets).detach()).mean()
        else:
            box_loss = dfl = zero
        return DetectionLossComponents(box=box_loss, cls=cls, dfl=dfl)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def decode(self, preds, image_ids, image_size, score_threshold=0.05, nms_iou=0.5):
        from ..evaluation import Detection

        height, width = image_size
        boxes_all = preds.decoded_boxes().detach()
        scores_all = preds.scores().detach()
        results = []
        for b, image_id in enumerate(image_ids):
            boxes = boxes_all[b].reshape(-1, 4).to(torch.float32)
            scores = scores_all[b].reshape(-1).to(torch.float32)
            keep = scores >= score_threshold
            boxes, scores = boxes[keep], scores[keep]
            order = nms(boxes, scores, nms_iou)
            detections = []
            for k in order.tolist():
                box = BoundingBox(*boxes[k].tolist()).clipped(width, height) if _positive(boxes[k]) else None
                if box is None:
                    continue
                detections.append(Detection(image_id=image_id, box=box, score=float(scores[k])))
            results.append(detections)
        return results


def _positive(box: torch.Tensor) -> bool:
    return bool(box[2] > box[0] and box[3] > box[1])


def exact_predictions(annotations: AnnotationSet, image_size: tuple[int, int], reg_max: int = 8,
                      stride: int = 4, confidence: float = 30.0) -> DensePredictions:
    """Dense predictions that reproduce ``annotations`` exactly.

    Boxes must sit on integer stride multiples around their assigned cell
    centre so every side distance is an integer number of bins.
    """
    h, w = image_size[0] // stride, image_size[1] // stride
    obj = torch.full((1, h, w), -confidence, dtype=torch.float64)
    cls = torch.full((1, h, w), confidence, dtype=torch.float64)
    box = torch.zeros(1, h, w, 4, reg_max + 1, dtype=torch.float64)
    for anno in annotations:
        if anno.label != PEDESTRIAN or anno.ignore:
            continue
        cx, cy = anno.box.center
        i, j = int(cy // stride), int(cx // stride)
        ccx, ccy = (j + 0.5) * stride, (i + 0.5) * stride
        sides = [(ccx - anno.box.x0) / stride, (ccy - anno.box.y0) / stride,
                 (anno.box.x1 - ccx) / stride, (anno.box.y1 - ccy) / stride]
        obj[0, i, j] = confidence
        for side, value in enumerate(sides):
            logits = torch.full((reg_max + 1,), -confidence * 1e3, dtype=torch.float64)
            logits[int(round(value))] = 0.0
            box[0, i, j, side] = logits
    return DensePredictions(obj_logits=obj, cls_logits=cls, box_logits=box, stride=stride)
