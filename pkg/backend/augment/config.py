"""Run configuration: YAML on disk, validated by RunConfigSerializer, frozen here."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from rest_framework import serializers

from .exceptions import ConfigError
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunSection:
    name: str = 'run'
    seed: int = 0


@dataclass(frozen=True)
class BackboneSection:
    kind: str = 'toy'
    mode: str = 'identity'
    prompt_dim: int = 16
    prompt_path: Optional[str] = None


@dataclass(frozen=True)
class ScheduleSection:
    alpha: float = 0.7
    timestep: int = 999
    resample_noise: bool = True


@dataclass(frozen=True)
class LoraSection:
    rank: int = 8
    scale: float = 1.0
    max_rank_fraction: float = 0.5
    targets: tuple[str, ...] = ()
    rank_overrides: dict[str, int] = field(default_factory=dict)

    def rank_for(self, target: str) -> int:
        return self.rank_overrides.get(target, self.rank)


@dataclass(frozen=True)
class EncoderSection:
    kind: str = 'toy-stats'
    model_id: str = 'facebook/dinov2-giant'
    layers: Optional[tuple[int, ...]] = None
    feature_source: str = 'semantic'


@dataclass(frozen=True)
class ContrastiveSection:
    num_patches: int = 128
    projection_dim: int = 256
    tau: float = 0.07
    gamma: float = 0.5
    ramp_steps: int = 12000


@dataclass(frozen=True)
class WeightsSection:
    src: float = 1.0
    hdce: float = 1.0
    det: float = 0.5
    idt: float = 0.1
    adv: float = 0.01
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5


@dataclass(frozen=True)
class AdversarialSection:
    non_saturating: bool = False
    perceptual: bool = False
    updates_per_step: int = 1
    lr: float = 1e-5


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-5
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass(frozen=True)
class TrainingSection:
    total_steps: int = 25000
    batch_size: int = 1
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class DetectorSection:
    kind: str = 'toy'
    checkpoint: Optional[str] = None
    fit_steps: tuple[int, ...] = (150, 150)
    fit_lr: float = 1e-3
    score_threshold: float = 0.05


@dataclass(frozen=True)
class CurationSection:
    threshold: float = 0.95
    crop_width: int = 8
    crop_height: int = 16
    negatives_per_image: int = 4
    attempt_budget: int = 10000
    classifier_steps: int = 200


@dataclass(frozen=True)
class EvaluationSection:
    iou_threshold: float = 0.5
    fppi_min: float = 1e-2
    fppi_max: float = 1.0
    fppi_points: int = 9
    num_projections: int = 128
    subsets: tuple[str, ...] = ('Reasonable', 'Small', 'Heavy', 'All')


@dataclass(frozen=True)
class MixingSection:
    ratios: tuple[float, ...] = (0.0, 0.05, 0.10, 0.20)
    seed: int = 0


@dataclass(frozen=True)
class LoggingSection:
    record_wall_time: bool = False


SECTIONS = {
    'run': RunSection,
    'backbone': BackboneSection,
    'schedule': ScheduleSection,
    'lora': LoraSection,
    'encoder': EncoderSection,
    'contrastive': ContrastiveSection,
    'weights': WeightsSection,
    'adversarial': AdversarialSection,
    'optimizer': OptimizerSection,
    'training': TrainingSection,
    'detector': DetectorSection,
    'curation': CurationSection,
    'evaluation': EvaluationSection,
    'mixing': MixingSection,
    'logging': LoggingSection,
}


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return {k: _freeze(v) for k, v in value.items()}
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_thaw(v) for v in value]
    if isinstance(value, dict):
        return {k: _thaw(v) for k, v in sorted(value.items())}
    return value


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    lora: LoraSection = field(default_factory=LoraSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    adversarial: AdversarialSection = field(default_factory=AdversarialSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    curation: CurationSection = field(default_factory=CurationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    mixing: MixingSection = field(default_factory=MixingSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'RunConfig':
        serializer = RunConfigSerializer(data=data or {})
        try:
            serializer.is_valid(raise_exception=True)
        except serializers.ValidationError as exc:
            raise ConfigError(f'invalid run config: {exc.detail}') from exc
        sections = {
            name: SECTIONS[name](**_freeze(dict(values)))
            for name, values in serializer.validated_data.items()
        }
        return cls(**sections)

    def to_dict(self) -> dict:
        return {f.name: _thaw(asdict(getattr(self, f.name))) for f in fields(self)}

    @property
    def hash(self) -> str:
        return config_hash(self)

    @property
    def seed(self) -> int:
        return self.run.seed


def config_hash(config: RunConfig) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON of the config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f'cannot read run config {path}: {exc}') from exc
    config = RunConfig.from_dict(data)
    logger.info('run config loaded', extra={'path': str(path), 'config_hash': config.hash})
    return config


def dump_config(config: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True, allow_unicode=True)
