"""One-step latent translation: encode, inject noise, denoise once, decode.

Backbones plug in through ``GeneratorBackbone``. The denoiser predicts noise
and the pipeline recovers the clean latent in a single scheduler step, the
same reconstruction turbo-style samplers use:

    z0 = (z_t - sigma_t * eps_hat) / alpha_t
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .exceptions import ConfigError, InvalidGeometry, TranslationError

logger = logging.getLogger(__name__)

VP_TOLERANCE = 1e-6


class GeneratorBackbone(nn.Module, ABC):
    """
    Adapter contract for a latent backbone.

    Subclasses expose the three stages separately so the pipeline can count
    denoiser calls and route skip features:

        encode(x)                          -> (z, skips)
        predict_noise(z_t, t, c, skips)    -> eps_hat, same shape as z_t
        decode(z, skips)                   -> image with x's spatial size

    ``adaptable_weights`` lists the weights LoRA may attach to and
    ``skip_parameters`` the trainable skip-connection mixers.
    """
    backbone_id: str = 'backbone'
    downsample_factor: int = 1
    image_channels: int = 3

    @abstractmethod
    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        ...

    @abstractmethod
    def predict_noise(self, z_t: torch.Tensor, t: int, c: torch.Tensor,
                      skips: Sequence[torch.Tensor]) -> torch.Tensor:
        ...

    @abstractmethod
    def decode(self, z: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        ...

    @abstractmethod
    def skip_parameters(self) -> list[nn.Parameter]:
        ...

    def adaptable_weights(self) -> dict[str, nn.Module]:
        from .lora import adaptable_weights
        skip_ids = {id(p) for p in self.skip_parameters()}
        return {
            name: module for name, module in adaptable_weights(self).items()
            if id(module.weight) not in skip_ids
        }

    def encoder_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Intermediate encoder maps, used when contrastive features come from the generator."""
        _, skips = self.encode(x)
        return list(skips)

    def freeze_base(self) -> None:
        """Freeze everything except adapters and skip mixers."""
        trainable = {id(p) for p in self.skip_parameters()}
        for name, p in self.named_parameters():
            if id(p) in trainable or '.adapter.' in f'.{name}':
                p.requires_grad_(True)
            else:
                p.requires_grad_(False)


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving coefficients per timestep: alpha_t^2 + sigma_t^2 = 1."""
    alphas: tuple[float, ...]
    timestep: int

    def __post_init__(self):
        if not (0 <= self.timestep < len(self.alphas)):
            raise ConfigError(f'timestep {self.timestep} outside schedule of length {len(self.alphas)}')
        for a in self.alphas:
            if not (0.0 <= a <= 1.0):
                raise ConfigError(f'alpha {a} outside [0, 1]')

    @classmethod
    def single_point(cls, alpha: float = 0.7, timestep: int = 999, num_steps: int = 1000) -> 'NoiseSchedule':
        """Schedule that only defines the fixed one-step point; other entries are clean."""
        alphas = [1.0] * max(num_steps, timestep + 1)
        alphas[timestep] = alpha
        return cls(tuple(alphas), timestep)

    @classmethod
    def scaled_linear(cls, timestep: int = 999, num_steps: int = 1000,
                      beta_start: float = 0.00085, beta_end: float = 0.012) -> 'NoiseSchedule':
        """The latent-diffusion beta schedule; alpha_t = sqrt(prod(1 - beta))."""
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, num_steps, dtype=torch.float64) ** 2
        alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
        return cls(tuple(alphas_cumprod.sqrt().tolist()), timestep)

    def alpha(self, t: Optional[int] = None) -> float:
        return self.alphas[self.timestep if t is None else t]

    def sigma(self, t: Optional[int] = None) -> float:
        return math.sqrt(max(0.0, 1.0 - self.alpha(t) ** 2))


def inject_noise(z: torch.Tensor, schedule: NoiseSchedule, t: int, epsilon: torch.Tensor) -> torch.Tensor:
    if epsilon.shape != z.shape:
        raise InvalidGeometry(f'noise shape {tuple(epsilon.shape)} does not match latent {tuple(z.shape)}')
    return schedule.alpha(t) * z + schedule.sigma(t) * epsilon


def encode_latent(backbone: GeneratorBackbone, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    if x.dim() != 4:
        raise InvalidGeometry(f'expected an N×C×H×W batch, got shape {tuple(x.shape)}')
    if x.min() < -VP_TOLERANCE or x.max() > 1.0 + VP_TOLERANCE:
        raise InvalidGeometry('image intensities must lie in [0, 1]')
    factor = backbone.downsample_factor
    height, width = x.shape[-2:]
    if height % factor or width % factor:
        raise InvalidGeometry(
            f'image size {width}x{height} must be a multiple of {factor} for {backbone.backbone_id}'
        )
    return backbone.encode(x)


def translate(
    backbone: GeneratorBackbone,
    schedule: NoiseSchedule,
    x: torch.Tensor,
    prompt_embedding: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    epsilon: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Translate a batch of day images in one denoiser call.

    Adapters are whatever is attached to ``backbone`` at call time. Noise
    comes from ``epsilon`` if given, otherwise from ``generator``.
    Failures are re-raised as TranslationError naming the stage.
    """
    t = schedule.timestep
    try:
        z, skips = encode_latent(backbone, x)
    except InvalidGeometry:
        raise
    except Exception as exc:
        raise TranslationError('encode', exc) from exc

    try:
        if epsilon is None:
            epsilon = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        z_t = inject_noise(z, schedule, t, epsilon)
    except Exception as exc:
        raise TranslationError('noise', exc) from exc

    try:
        eps_hat = backbone.predict_noise(z_t, t, prompt_embedding, skips)
        z0 = (z_t - schedule.sigma(t) * eps_hat) / max(schedule.alpha(t), 1e-8)
    except Exception as exc:
        raise TranslationError('denoise', exc) from exc

    try:
        out = backbone.decode(z0, skips)
    except Exception as exc:
        raise TranslationError('decode', exc) from exc
    return out.clamp(0.0, 1.0)


class Translator(nn.Module):
    """G_theta as a callable: backbone + schedule + fixed prompt embedding."""

    def __init__(self, backbone: GeneratorBackbone, schedule: NoiseSchedule, prompt_embedding: torch.Tensor):
        super().__init__()
        self.backbone = backbone
        self.schedule = schedule
        self.register_buffer('prompt_embedding', prompt_embedding.detach().clone())

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None,
                epsilon: Optional[torch.Tensor] = None) -> torch.Tensor:
        return translate(self.backbone, self.schedule, x, self.prompt_embedding, generator, epsilon)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.backbone.parameters() if p.requires_grad]
