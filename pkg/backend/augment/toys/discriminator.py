"""Small discriminators for toy runs."""
from typing import Optional

import torch
from torch import nn

from ..encoder import SemanticEncoder, pooled_features
from ..objectives import Discriminator


class PatchDiscriminator(Discriminator):
    """
    Convolutional patch discriminator (4×4 kernels, LeakyReLU 0.2, no
    normalisation). Patch logits are averaged into one logit per image.

    With ``perceptual_encoder`` the pooled frozen-encoder features of the
    input are broadcast over the image and concatenated as extra channels.
    """

    def __init__(self, channels: int = 3, ndf: int = 16, n_layers: int = 2,
                 perceptual_encoder: Optional[SemanticEncoder] = None, perceptual_dim: int = 0, seed: int = 0):
        super().__init__()
        # held by reference: the encoder's weights belong to the encoder, not to D
        object.__setattr__(self, 'perceptual_encoder', perceptual_encoder)
        if perceptual_encoder is not None and perceptual_dim <= 0:
            raise ValueError('perceptual_dim must be set when a perceptual encoder is given')
        self.perceptual_dim = perceptual_dim if perceptual_encoder is not None else 0

        g = torch.Generator().manual_seed(seed)
        layers = [nn.Conv2d(channels + self.perceptual_dim, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(ndf * mult, 1, 3, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)
        with torch.no_grad():
            for module in self.model:
                if isinstance(module, nn.Conv2d):
                    module.weight.copy_(torch.randn(module.weight.shape, generator=g) * 0.02)
                    module.bias.zero_()

    def forward(self, images):
        x = images.to(self.model[0].weight.dtype)
        if self.perceptual_encoder is not None:
            feats = pooled_features(self.perceptual_encoder, x).to(x.dtype)
            x = torch.cat([x, feats[:, :, None, None].expand(-1, -1, *x.shape[-2:])], dim=1)
        return self.model(x).mean(dim=(1, 2, 3))


class LinearDiscriminator(Discriminator):
    """Logistic regression on flattened pixels."""

    def __init__(self, num_inputs: int):
        super().__init__()
        self.linear = nn.Linear(num_inputs, 1)
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()

    def forward(self, images):
        return self.linear(images.flatten(1).to(self.linear.weight.dtype)).squeeze(-1)


def separation(D: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> float:
    """Mean logit gap between real and fake batches."""
    with torch.no_grad():
        return float(D(real).mean() - D(fake).mean())

