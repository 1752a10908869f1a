"""Builds the pluggable components a run config names."""
import logging
from pathlib import Path
from typing import Optional

import torch
from safetensors.torch import load_file, save_file

from .config import AdversarialSection, BackboneSection, DetectorSection, EncoderSection, RunConfig
from .detection import DetectorHead
from .encoder import DinoV2Encoder, GeneratorFeatureEncoder, SemanticEncoder
from .exceptions import CheckpointError, ConfigError
from .generator import GeneratorBackbone, NoiseSchedule, Translator
from .lora import attach_adapters
from .objectives import Discriminator
from .toys.backbone import ToyBackbone
from .toys.detector import ToyDenseDetector
from .toys.discriminator import PatchDiscriminator
from .toys.encoder import ToyPatchEncoder
from .utils.seeding import derive_seed, torch_generator

logger = logging.getLogger(__name__)


# ==========================================
# GENERATOR
# ==========================================

def build_backbone(section: BackboneSection, seed: int) -> GeneratorBackbone:
    if section.kind == 'toy':
        return ToyBackbone(mode=section.mode, prompt_dim=section.prompt_dim, seed=derive_seed(seed, 'backbone'))
    raise ConfigError(f'unknown backbone kind {section.kind!r}')


def prompt_embedding(section: BackboneSection, seed: int) -> torch.Tensor:
    """The fixed conditioning vector: loaded from disk, or a seeded stand-in for toy runs."""
    if section.prompt_path:
        try:
            return load_file(section.prompt_path)['embedding']
        except (OSError, KeyError) as exc:
            raise ConfigError(f'cannot read prompt embedding {section.prompt_path}: {exc}') from exc
    return torch.randn(section.prompt_dim, generator=torch_generator(seed, 'prompt'))


def save_prompt_embedding(embedding: torch.Tensor, path) -> None:
    save_file({'embedding': embedding.detach().contiguous()}, str(path))


def build_translator(config: RunConfig) -> Translator:
    """Backbone with LoRA adapters attached and the base frozen."""
    backbone = build_backbone(config.backbone, config.seed)
    attach_adapters(
        backbone,
        targets=config.lora.targets,
        rank_for=config.lora.rank_for,
        seed=derive_seed(config.seed, 'lora'),
        scale=config.lora.scale,
        max_rank_fraction=config.lora.max_rank_fraction,
    )
    backbone.freeze_base()
    schedule = NoiseSchedule.single_point(alpha=config.schedule.alpha, timestep=config.schedule.timestep)
    return Translator(backbone, schedule, prompt_embedding(config.backbone, config.seed))


# ==========================================
# ENCODER, DETECTOR, DISCRIMINATOR
# ==========================================

def build_encoder(section: EncoderSection) -> SemanticEncoder:
    """The frozen semantic encoder (also used for curation and FID/WD features)."""
    if section.kind in ('toy-stats', 'toy-intensity'):
        return ToyPatchEncoder(mode=section.kind.split('-', 1)[1]).freeze()
    if section.kind == 'dinov2':
        return DinoV2Encoder(section.model_id)
    raise ConfigError(f'unknown encoder kind {section.kind!r}')


def build_contrastive_encoder(section: EncoderSection, semantic: SemanticEncoder,
                              backbone: GeneratorBackbone, image_size: tuple[int, int]) -> SemanticEncoder:
    if section.feature_source == 'generator':
        return GeneratorFeatureEncoder(backbone, image_size)
    return semantic


def build_detector(section: DetectorSection, seed: int) -> DetectorHead:
    if section.kind != 'toy':
        raise ConfigError(f'unknown detector kind {section.kind!r}')
    detector = ToyDenseDetector(seed=derive_seed(seed, 'detector'))
    if section.checkpoint:
        load_detector(detector, section.checkpoint)
    return detector


def save_detector(detector: DetectorHead, path, config_hash: Optional[str] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().contiguous() for k, v in detector.state_dict().items()}
    save_file(state, str(path), metadata={'detector': detector.detector_id, 'config_hash': config_hash or ''})


def load_detector(detector: DetectorHead, path) -> DetectorHead:
    try:
        state = load_file(str(path))
        detector.load_state_dict(state)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f'cannot load detector weights from {path}: {exc}') from exc
    logger.info('detector weights loaded', extra={'path': str(path), 'detector': detector.detector_id})
    return detector.freeze()


def build_discriminator(section: AdversarialSection, encoder: SemanticEncoder, seed: int) -> Discriminator:
    if not section.perceptual:
        return PatchDiscriminator(seed=derive_seed(seed, 'discriminator'))
    probe = torch.zeros(1, 3, *encoder.input_size)
    with torch.no_grad():
        dim = encoder.hidden_states(encoder.preprocess(probe))[encoder.default_layers()[-1]].shape[-1]
    return PatchDiscriminator(perceptual_encoder=encoder, perceptual_dim=dim, seed=derive_seed(seed, 'discriminator'))
