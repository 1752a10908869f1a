"""Two-level convolutional toy backbone with exact identity/darkening priors.

Encoder: a 2×2 space-to-depth conv (exact pixel unshuffle) then a 1×1 mixer.
Denoiser: a small conv net predicting noise, output layer zero-initialised.
Decoder: inverse mixer, concat with the level-1 skip, pixel shuffle, concat
with the input skip, 1×1 tone conv plus a per-pixel residual tone MLP whose
output layer starts at zero. Skip mixers start as [I | 0], so in
identity mode decode(encode(x)) == x exactly; darkening mode sets the tone
conv to 0.25·I.
"""
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..generator import GeneratorBackbone

MODES = {'identity': 1.0, 'darkening': 0.25}


def _eye_conv(conv: nn.Conv2d, gain: float = 1.0) -> None:
    with torch.no_grad():
        conv.weight.zero_()
        for c in range(min(conv.out_channels, conv.in_channels)):
            conv.weight[c, c, 0, 0] = gain
        if conv.bias is not None:
            conv.bias.zero_()


class ToyBackbone(GeneratorBackbone):
    backbone_id = 'toy'
    downsample_factor = 2

    def __init__(self, mode: str = 'identity', channels: int = 3, hidden: int = 32,
                 prompt_dim: int = 16, tone_hidden: int = 8, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f'unknown toy backbone mode {mode!r}; expected one of {sorted(MODES)}')
        self.mode = mode
        self.image_channels = channels
        latent = channels * 4

        g = torch.Generator().manual_seed(seed)

        # VAE encoder
        self.vae_encoder = nn.ModuleDict({
            'conv_in': nn.Conv2d(channels, latent, kernel_size=2, stride=2, bias=False),
            'mix': nn.Conv2d(latent, latent, kernel_size=1),
        })
        # UNet-ish noise predictor
        self.unet = nn.ModuleDict({
            'conv_in': nn.Conv2d(latent, hidden, kernel_size=3, padding=1),
            'time_proj': nn.Linear(1, hidden),
            'cond_proj': nn.Linear(prompt_dim, hidden),
            'conv_out': nn.Conv2d(hidden, latent, kernel_size=3, padding=1),
        })
        # VAE decoder
        self.vae_decoder = nn.ModuleDict({
            'mix': nn.Conv2d(latent, latent, kernel_size=1),
            'conv_out': nn.Conv2d(channels, channels, kernel_size=1),
            'tone_in': nn.Conv2d(channels, tone_hidden, kernel_size=1),
            'tone_out': nn.Conv2d(tone_hidden, channels, kernel_size=1),
        })
        # skip-connection mixers (trainable alongside the adapters)
        self.skip_latent = nn.Conv2d(2 * latent, latent, kernel_size=1)
        self.skip_image = nn.Conv2d(2 * channels, channels, kernel_size=1)

        self._init_weights(g, channels)

    def _init_weights(self, g: torch.Generator, channels: int) -> None:
        with torch.no_grad():
            unshuffle = self.vae_encoder['conv_in'].weight
            unshuffle.zero_()
            for c in range(channels):
                for i in range(2):
                    for j in range(2):
                        unshuffle[c * 4 + i * 2 + j, c, i, j] = 1.0
            _eye_conv(self.vae_encoder['mix'])
            _eye_conv(self.vae_decoder['mix'])
            _eye_conv(self.vae_decoder['conv_out'], gain=MODES[self.mode])
            _eye_conv(self.skip_latent)
            _eye_conv(self.skip_image)

            for name in ('conv_in', 'time_proj', 'cond_proj'):
                layer = self.unet[name]
                fan_in = layer.weight[0].numel()
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) / fan_in ** 0.5)
                layer.bias.zero_()
            self.unet['conv_out'].weight.zero_()
            self.unet['conv_out'].bias.zero_()

            # kinks spread over [0, 1] so the tone MLP can bend any intensity range
            tone_in = self.vae_decoder['tone_in']
            tone_in.weight.copy_(torch.randn(tone_in.weight.shape, generator=g).abs() * 4.0)
            tone_in.bias.copy_(-torch.linspace(0.0, 4.0, tone_in.out_channels))
            self.vae_decoder['tone_out'].weight.zero_()
            self.vae_decoder['tone_out'].bias.zero_()

    def encode(self, x):
        h1 = self.vae_encoder['conv_in'](x)
        z = self.vae_encoder['mix'](h1)
        return z, [x, h1]

    def predict_noise(self, z_t, t, c, skips: Sequence[torch.Tensor]):
        t_feat = torch.full((z_t.shape[0], 1), t / 1000.0, dtype=z_t.dtype, device=z_t.device)
        c = c.to(z_t.dtype).reshape(1, -1).expand(z_t.shape[0], -1)
        bias = self.unet['time_proj'](t_feat) + self.unet['cond_proj'](c)
        h = self.unet['conv_in'](z_t) + bias[:, :, None, None]
        return self.unet['conv_out'](F.silu(h))

    def decode(self, z, skips: Sequence[torch.Tensor]):
        x_skip, h1 = skips
        h = self.vae_decoder['mix'](z)
        h = self.skip_latent(torch.cat([h, h1], dim=1))
        y = F.pixel_shuffle(h, 2)
        y = self.skip_image(torch.cat([y, x_skip], dim=1))
        tone = self.vae_decoder['tone_out'](F.silu(self.vae_decoder['tone_in'](y)))
        return self.vae_decoder['conv_out'](y) + tone

    def skip_parameters(self):
        return [*self.skip_latent.parameters(), *self.skip_image.parameters()]
