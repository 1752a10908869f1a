"""Synthetic + real-night training mixes at a given injection ratio."""
import logging
import math
from dataclasses import dataclass
from decimal import ROUND_FLOOR, Decimal

from .domain import NIGHT, SYNTHETIC_NIGHT, DatasetManifest
from .exceptions import AnnotationMismatch, ConfigError, InsufficientDataError
from .utils.seeding import numpy_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixSpec:
    synthetic: DatasetManifest
    real_night: DatasetManifest
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not (self.ratio >= 0 and math.isfinite(self.ratio)):
            raise ConfigError(f'injection ratio must be a non-negative number, got {self.ratio}')

    @property
    def real_count(self) -> int:
        """floor(ratio * |synthetic|), computed on the decimal ratio so 0.05 * 4266 gives 213."""
        exact = Decimal(str(self.ratio)) * len(self.synthetic)
        return int(exact.to_integral_value(rounding=ROUND_FLOOR))


def build_mixed_set(spec: MixSpec) -> DatasetManifest:
    """Synthetic entries followed by a seeded sample of real night entries (file order kept)."""
    for entry in spec.synthetic:
        if entry.domain != SYNTHETIC_NIGHT:
            raise AnnotationMismatch(f'{entry.image_id}: expected a synthetic_night entry, got {entry.domain}')
    for entry in spec.real_night:
        if entry.domain != NIGHT:
            raise AnnotationMismatch(f'{entry.image_id}: expected a night entry, got {entry.domain}')

    count = spec.real_count
    if count > len(spec.real_night):
        raise InsufficientDataError(required=count, available=len(spec.real_night))

    picked = []
    if count:
        rng = numpy_rng(spec.seed, 'mix', str(spec.ratio))
        indices = sorted(rng.choice(len(spec.real_night), size=count, replace=False).tolist())
        picked = [spec.real_night[i] for i in indices]

    mixed = spec.synthetic.extended(picked)
    logger.info('mixed set built', extra={'ratio': spec.ratio, 'synthetic': len(spec.synthetic),
                                          'real_night': count, 'seed': spec.seed})
    return mixed
