"""Frozen semantic encoders, multi-layer patch features and projection heads."""
import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn

from .exceptions import EncoderError

logger = logging.getLogger(__name__)


class SemanticEncoder(nn.Module, ABC):
    """
    Adapter contract for a patch encoder.

    ``hidden_states`` returns one token sequence per layer, each B×(S+N)×C
    with S = ``num_special_tokens`` leading tokens (CLS, registers) that
    extract_stack drops.
    """
    encoder_id: str = 'encoder'
    input_size: tuple[int, int] = (224, 224)
    num_special_tokens: int = 0
    requires_frozen: bool = True

    @abstractmethod
    def hidden_states(self, x: torch.Tensor) -> list[torch.Tensor]:
        ...

    @abstractmethod
    def grid_shape(self, layer: int) -> tuple[int, int]:
        ...

    @property
    @abstractmethod
    def num_layers(self) -> int:
        ...

    def default_layers(self) -> tuple[int, ...]:
        return tuple(range(self.num_layers))

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) == tuple(self.input_size):
            return x
        return F.interpolate(x, size=self.input_size, mode='bilinear', align_corners=False, antialias=True)

    def freeze(self) -> 'SemanticEncoder':
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


@dataclass(frozen=True)
class LayerFeatures:
    layer_id: int
    features: torch.Tensor  # B × N_l × C_l
    height: int
    width: int

    @property
    def num_patches(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class PatchFeatureStack:
    layers: tuple[LayerFeatures, ...]

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(layer.layer_id for layer in self.layers)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(layer.num_patches for layer in self.layers)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(layer.channels for layer in self.layers)


@dataclass(frozen=True)
class PatchIndexSet:
    indices: tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.indices)

    @property
    def num_patches(self) -> int:
        return self.indices[0].numel() if self.indices else 0


def default_layer_ids(depth: int, count: int = 5) -> tuple[int, ...]:
    """Hidden-state indices of the ``count`` blocks ending one before the final block.

    hidden_states[0] is the embedding output and hidden_states[i] the output
    of block i, so for depth 40 this is (35, 36, 37, 38, 39).
    """
    if depth <= count:
        raise EncoderError(f'encoder depth {depth} too shallow for {count} layers')
    return tuple(range(depth - count, depth))


def extract_stack(encoder: SemanticEncoder, x: torch.Tensor,
                  layers: Optional[Sequence[int]] = None) -> PatchFeatureStack:
    if encoder.requires_frozen and not encoder.is_frozen:
        raise EncoderError(f'{encoder.encoder_id}: encoder must be frozen before feature extraction')
    layers = tuple(layers) if layers is not None else encoder.default_layers()
    for layer in layers:
        if not (0 <= layer < encoder.num_layers):
            raise EncoderError(f'{encoder.encoder_id}: layer {layer} outside [0, {encoder.num_layers})')

    states = encoder.hidden_states(encoder.preprocess(x))
    collected = []
    for layer in layers:
        tokens = states[layer][:, encoder.num_special_tokens:, :]
        height, width = encoder.grid_shape(layer)
        if tokens.shape[1] != height * width:
            raise EncoderError(
                f'{encoder.encoder_id}: layer {layer} has {tokens.shape[1]} patch tokens, '
                f'expected {height}x{width}'
            )
        collected.append(LayerFeatures(layer, tokens, height, width))
    return PatchFeatureStack(tuple(collected))


def sample_indices(stack_shape: Union[PatchFeatureStack, Sequence[int]], num_patches: int,
                   generator: Optional[torch.Generator] = None) -> PatchIndexSet:
    """Uniform sampling without replacement, independently per layer."""
    sizes = stack_shape.shape if isinstance(stack_shape, PatchFeatureStack) else tuple(stack_shape)
    for n in sizes:
        if num_patches > n:
            raise EncoderError(f'cannot sample {num_patches} patches from a layer with {n}')
    return PatchIndexSet(tuple(torch.randperm(n, generator=generator)[:num_patches] for n in sizes))


class ProjectionHead(nn.Module):
    """Two-layer MLP C_l -> hidden -> d with unit-norm output rows."""

    def __init__(self, in_dim: int, out_dim: int = 256, hidden_dim: Optional[int] = None,
                 activation=nn.Softplus):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            activation(),
            nn.Linear(hidden_dim, out_dim),
        )

    @property
    def in_dim(self) -> int:
        return self.net[0].in_features

    def forward(self, features):
        return F.normalize(self.net(features), dim=-1, eps=1e-12)


class ProjectionHeads(nn.ModuleDict):
    """One head per layer id (keys are the layer ids as strings)."""

    @classmethod
    def for_stack(cls, stack: PatchFeatureStack, out_dim: int = 256, seed: int = 0) -> 'ProjectionHeads':
        g = torch.Generator().manual_seed(seed)
        heads = cls()
        for layer in stack.layers:
            head = ProjectionHead(layer.channels, out_dim)
            with torch.no_grad():
                for p in head.parameters():
                    bound = 1.0 / max(1, p.shape[-1]) ** 0.5
                    p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * bound)
            heads[str(layer.layer_id)] = head
        return heads.to(stack.layers[0].features.dtype)


def project(stack: PatchFeatureStack, indices: PatchIndexSet, heads: ProjectionHeads) -> list[torch.Tensor]:
    """Gather the sampled patches of each layer and embed them: B × N_p × d per layer."""
    if len(indices) != len(stack.layers):
        raise EncoderError(f'{len(indices)} index sets for a stack of {len(stack.layers)} layers')
    embedded = []
    for layer, idx in zip(stack.layers, indices.indices):
        if idx.numel() and (idx.min() < 0 or idx.max() >= layer.num_patches):
            raise EncoderError(f'patch index out of range for layer {layer.layer_id} ({layer.num_patches} patches)')
        key = str(layer.layer_id)
        if key not in heads:
            raise EncoderError(f'no projection head for layer {layer.layer_id}')
        head = heads[key]
        if head.in_dim != layer.channels:
            raise EncoderError(
                f'head for layer {layer.layer_id} expects {head.in_dim} channels, got {layer.channels}'
            )
        embedded.append(head(layer.features[:, idx, :]))
    return embedded


def pooled_features(encoder: SemanticEncoder, x: torch.Tensor, layer: Optional[int] = None) -> torch.Tensor:
    """B × C mean of the patch embeddings of one layer (the last configured by default)."""
    layer = encoder.default_layers()[-1] if layer is None else layer
    stack = extract_stack(encoder, x, layers=(layer,))
    return stack.layers[0].features.mean(dim=1)


class FeatureCache:
    """On-disk cache of pooled features keyed by (encoder id, image id, layer set)."""

    def __init__(self, root: Union[str, Path], encoder_id: str):
        self.root = Path(root)
        self.encoder_id = encoder_id
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_id: str, layers: Sequence[int]) -> Path:
        key = f'{self.encoder_id}|{image_id}|{",".join(map(str, layers))}'
        return self.root / f'{hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]}.safetensors'

    def get(self, image_id: str, layers: Sequence[int]) -> Optional[torch.Tensor]:
        path = self._path(image_id, layers)
        if not path.exists():
            return None
        return load_file(str(path))['features']

    def put(self, image_id: str, layers: Sequence[int], features: torch.Tensor) -> None:
        save_file(
            {'features': features.detach().contiguous().cpu()},
            str(self._path(image_id, layers)),
            metadata={'encoder_id': self.encoder_id, 'image_id': image_id},
        )

    def pooled(self, encoder: SemanticEncoder, image_id: str, x: torch.Tensor) -> torch.Tensor:
        layers = (encoder.default_layers()[-1],)
        cached = self.get(image_id, layers)
        if cached is not None:
            return cached
        with torch.no_grad():
            features = pooled_features(encoder, x, layer=layers[0])[0]
        self.put(image_id, layers, features)
        return features


class GeneratorFeatureEncoder(SemanticEncoder):
    """Exposes the generator's own encoder maps as patch tokens.

    Used for the ablation where contrastive features come from the generator
    rather than an external frozen encoder. The backbone is held by reference
    so its parameters stay owned by the generator.
    """
    requires_frozen = False

    def __init__(self, backbone, input_size: tuple[int, int]):
        super().__init__()
        object.__setattr__(self, 'backbone', backbone)
        self.input_size = tuple(input_size)
        self.encoder_id = f'generator:{backbone.backbone_id}'
        probe = torch.zeros(1, backbone.image_channels, *self.input_size)
        with torch.no_grad():
            self._grids = [tuple(f.shape[-2:]) for f in backbone.encoder_features(probe)]

    @property
    def num_layers(self) -> int:
        return len(self._grids)

    def grid_shape(self, layer):
        return self._grids[layer]

    def hidden_states(self, x):
        return [f.flatten(2).transpose(1, 2) for f in self.backbone.encoder_features(x)]


class DinoV2Encoder(SemanticEncoder):
    """Hugging Face DINOv2 binding (504×504 input, 14-pixel patches)."""
    input_size = (504, 504)

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, model_id: str = 'facebook/dinov2-giant'):
        super().__init__()
        from transformers import AutoModel

        self.encoder_id = model_id
        self.model = AutoModel.from_pretrained(model_id)
        cfg = self.model.config
        self.patch_size = cfg.patch_size
        self.depth = cfg.num_hidden_layers
        self.num_special_tokens = 1 + getattr(cfg, 'num_register_tokens', 0)
        self.register_buffer('mean', torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1))
        self.freeze()

    @property
    def num_layers(self) -> int:
        return self.depth + 1

    def default_layers(self):
        return default_layer_ids(self.depth)

    def grid_shape(self, layer):
        return (self.input_size[0] // self.patch_size, self.input_size[1] // self.patch_size)

    def preprocess(self, x):
        return (super().preprocess(x) - self.mean) / self.std

    def hidden_states(self, x):
        return list(self.model(pixel_values=x, output_hidden_states=True).hidden_states)
