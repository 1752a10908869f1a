"""Pedestrian/background crop classifier trained on mined toy crops."""
import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..curation import PatchClassifier, extract_crop, mine_negative_crops
from ..domain import ImageSample
from ..exceptions import InsufficientDataError
from ..utils.seeding import derive_seed, numpy_rng

logger = logging.getLogger(__name__)


class ToyPatchClassifier(nn.Module, PatchClassifier):
    def __init__(self, input_size: tuple[int, int] = (16, 8), width: int = 8, seed: int = 0):
        super().__init__()
        self.input_size = tuple(input_size)
        g = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d((4, 2)),
        )
        self.logit = nn.Linear(width * 8, 1)
        with torch.no_grad():
            for module in (self.features[0], self.logit):
                fan_in = module.weight[0].numel()
                module.weight.copy_(torch.randn(module.weight.shape, generator=g) / fan_in ** 0.5)
                module.bias.zero_()

    def forward(self, crops):
        return self.logit(self.features(crops.to(self.logit.weight.dtype)).flatten(1)).squeeze(-1)

    def pedestrian_probability(self, crops):
        return torch.sigmoid(self(crops))


def crop_dataset(samples: Sequence[ImageSample], input_size: tuple[int, int], crop_size: tuple[int, int],
                 negatives_per_image: int, seed: int, attempt_budget: int = 10000) -> tuple[torch.Tensor, torch.Tensor]:
    """Positive crops at every pedestrian box plus mined negatives; (crops, labels)."""
    crops, labels = [], []
    for sample in samples:
        for anno in sample.pedestrians:
            crops.append(extract_crop(sample.pixels, anno.box, input_size))
            labels.append(1.0)
        mined = mine_negative_crops(sample, crop_size, negatives_per_image,
                                    numpy_rng(seed, 'negatives', sample.image_id), attempt_budget)
        for box in mined.boxes:
            crops.append(extract_crop(sample.pixels, box, input_size))
            labels.append(0.0)
    if not crops or len(set(labels)) < 2:
        raise InsufficientDataError(required=2, available=len(set(labels)))
    return torch.stack(crops), torch.tensor(labels)


def fit_patch_classifier(classifier: ToyPatchClassifier, samples: Sequence[ImageSample],
                         crop_size: tuple[int, int], negatives_per_image: int = 4, steps: int = 200,
                         lr: float = 1e-2, seed: int = 0, attempt_budget: int = 10000) -> ToyPatchClassifier:
    crops, labels = crop_dataset(samples, classifier.input_size, crop_size, negatives_per_image, seed, attempt_budget)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=lr)
    rng = np.random.default_rng(derive_seed(seed, 'classifier'))
    batch = min(32, len(labels))
    classifier.train()
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(labels), size=batch, replace=False))
        loss = F.binary_cross_entropy_with_logits(classifier(crops[idx]), labels[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    classifier.eval()
    with torch.no_grad():
        accuracy = float(((classifier(crops) > 0).float() == labels).float().mean())
    logger.info('patch classifier fitted', extra={'crops': len(labels), 'steps': steps, 'accuracy': accuracy})
    return classifier
