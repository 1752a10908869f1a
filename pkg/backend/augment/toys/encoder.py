"""Deterministic patchifier standing in for a pretrained ViT."""
import torch
import torch.nn.functional as F
from torch import nn

from ..encoder import SemanticEncoder

STATS_CHANNELS = 8


class ToyPatchEncoder(SemanticEncoder):
    """
    Two "layers" of per-patch statistics on a fixed grid.

    mode='stats': per-channel means (3), luminance std, mean |dx|, mean |dy|,
    luminance mean and luminance range per patch.
    mode='intensity': the patch mean intensity replicated across channels.

    Layer 1 averages layer 0 over each patch's 3×3 neighbourhood and applies
    a fixed channel mixer. A leading CLS-style token (the mean patch) mimics
    the special tokens of a real ViT.
    """
    num_special_tokens = 1

    def __init__(self, mode: str = 'stats', input_size: tuple[int, int] = (32, 32), patch: int = 8):
        super().__init__()
        if mode not in ('stats', 'intensity'):
            raise ValueError(f'unknown toy encoder mode {mode!r}')
        if input_size[0] % patch or input_size[1] % patch:
            raise ValueError('input size must be a multiple of the patch size')
        self.mode = mode
        self.patch = patch
        self.input_size = tuple(input_size)
        self.encoder_id = f'toy-{mode}'
        self.mixer = nn.Parameter(torch.eye(STATS_CHANNELS), requires_grad=False)

    @property
    def num_layers(self) -> int:
        return 2

    def grid_shape(self, layer):
        return (self.input_size[0] // self.patch, self.input_size[1] // self.patch)

    def _patch_stats(self, x):
        p = self.patch
        lum = x.mean(dim=1, keepdim=True)
        if self.mode == 'intensity':
            return F.avg_pool2d(lum, p).expand(-1, STATS_CHANNELS, -1, -1)

        means = F.avg_pool2d(x[:, :3], p)
        lum_mean = F.avg_pool2d(lum, p)
        var = (F.avg_pool2d(lum * lum, p) - lum_mean * lum_mean).clamp_min(0.0)
        std = torch.sqrt(var + 1e-12)
        dx = F.pad((lum[..., :, 1:] - lum[..., :, :-1]).abs(), (0, 1, 0, 0))
        dy = F.pad((lum[..., 1:, :] - lum[..., :-1, :]).abs(), (0, 0, 0, 1))
        grad_x = F.avg_pool2d(dx, p)
        grad_y = F.avg_pool2d(dy, p)
        spread = F.max_pool2d(lum, p) + F.max_pool2d(-lum, p)
        return torch.cat([means, std, grad_x, grad_y, lum_mean, spread], dim=1)

    @staticmethod
    def _tokens(grid):
        tokens = grid.flatten(2).transpose(1, 2)
        cls = tokens.mean(dim=1, keepdim=True)
        return torch.cat([cls, tokens], dim=1)

    def hidden_states(self, x):
        layer0 = self._patch_stats(x)
        context = F.avg_pool2d(layer0, 3, stride=1, padding=1, count_include_pad=False)
        layer1 = torch.einsum('bchw,dc->bdhw', context, self.mixer.to(context.dtype))
        return [self._tokens(layer0), self._tokens(layer1)]
