"""Identity, adversarial and total objectives, plus the per-step loss report."""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .contrastive import RampSchedule
from .exceptions import DiscriminatorRangeError, LossInputError, NonFiniteLossError

logger = logging.getLogger(__name__)

COMPONENTS = ('src', 'hdce', 'det', 'idt', 'adv')
RAMPED = ('src', 'hdce')


def identity_loss(G: Callable[[torch.Tensor], torch.Tensor], x_T: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel change G makes to a real night image."""
    out = G(x_T)
    if out.shape != x_T.shape:
        raise LossInputError(f'generator changed the image shape {tuple(x_T.shape)} -> {tuple(out.shape)}')
    return (out - x_T).abs().mean()


# ==========================================
# ADVERSARIAL
# ==========================================

class Discriminator(nn.Module, ABC):
    """
    D_phi returning one logit per image; ``score`` is the probability of a
    real night image. An optional frozen feature extractor supplies a
    perceptual channel.
    """

    @abstractmethod
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        ...

    def score(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(images))


Scorer = Union[Discriminator, Callable[[torch.Tensor], torch.Tensor]]


def _log_probs(D: Scorer, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(log D(x), log(1 - D(x))) per image."""
    if isinstance(D, Discriminator):
        logits = D(images)
        return F.logsigmoid(logits), F.logsigmoid(-logits)
    p = torch.as_tensor(D(images), dtype=images.dtype)
    if not torch.isfinite(p).all() or (p <= 0).any() or (p >= 1).any():
        raise DiscriminatorRangeError('discriminator outputs must be probabilities strictly inside (0, 1)')
    return torch.log(p), torch.log1p(-p)


def discriminator_loss(D: Scorer, real_batch: torch.Tensor, fake_batch: torch.Tensor) -> torch.Tensor:
    """-(E[log D(real)] + E[log(1 - D(fake))]); fakes are detached from the generator."""
    log_real, _ = _log_probs(D, real_batch)
    _, log_fake = _log_probs(D, fake_batch.detach())
    return -(log_real.mean() + log_fake.mean())


def generator_adversarial_loss(D: Scorer, fake_batch: torch.Tensor, non_saturating: bool = False) -> torch.Tensor:
    """E[log(1 - D(fake))], or -E[log D(fake)] when ``non_saturating``."""
    log_d, log_not_d = _log_probs(D, fake_batch)
    if non_saturating:
        return -log_d.mean()
    return log_not_d.mean()


# ==========================================
# TOTAL OBJECTIVE
# ==========================================

@dataclass(frozen=True)
class LossWeights:
    src: float = 1.0
    hdce: float = 1.0
    det: float = 0.5
    idt: float = 0.1
    adv: float = 0.01
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0 and math.isfinite(value)):
                raise LossInputError(f'loss weight {name} must be a finite non-negative number, got {value}')

    @classmethod
    def from_section(cls, section) -> 'LossWeights':
        return cls(**{key: getattr(section, key) for key in cls.__dataclass_fields__})


@dataclass(frozen=True)
class LossReport:
    step: int
    raw: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    wall_time: Optional[float] = None


def effective_weights(weights: LossWeights, step: int, ramp: RampSchedule) -> dict[str, float]:
    factor = ramp.weight(step)
    return {
        name: getattr(weights, name) * (factor if name in RAMPED else 1.0)
        for name in COMPONENTS
    }


def total_loss(components: Mapping[str, torch.Tensor], weights: LossWeights, step: int,
               ramp: Optional[RampSchedule] = None) -> tuple[torch.Tensor, LossReport]:
    """
    sum_c w_c(step) * L_c over the supplied components; SRC and hDCE weights
    follow the ramp. Any non-finite component aborts with its name.
    """
    ramp = ramp or RampSchedule()
    unknown = sorted(set(components) - set(COMPONENTS))
    if unknown:
        raise LossInputError(f'unknown loss components {unknown}')
    effective = effective_weights(weights, step, ramp)

    total = None
    raw = {}
    for name in COMPONENTS:
        if name not in components:
            continue
        value = components[name]
        value = value if isinstance(value, torch.Tensor) else torch.tensor(float(value), dtype=torch.float64)
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        raw[name] = scalar
        term = effective[name] * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    report = LossReport(step=step, raw=raw, weights=effective, total=float(total.detach()))
    return total, report
