"""Low-rank adaptation of frozen weights.

An adapter on a base weight W0 (d×k) holds A (d×r) and B (r×k); the effective
weight is W0 + scale·A@B. Convolutions are treated as d = out_channels by
k = in_channels·kh·kw linear maps.
"""
import logging
import math
from typing import Iterable, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import LoraRankError, LoraShapeError

logger = logging.getLogger(__name__)


class LoraAdapter(nn.Module):
    def __init__(self, target_name: str, A: torch.Tensor, B: torch.Tensor, scale: float = 1.0):
        super().__init__()
        if A.dim() != 2 or B.dim() != 2 or A.shape[1] != B.shape[0]:
            raise LoraShapeError(
                f'{target_name}: A {tuple(A.shape)} and B {tuple(B.shape)} do not compose'
            )
        if not (torch.isfinite(A).all() and torch.isfinite(B).all()):
            raise LoraShapeError(f'{target_name}: adapter factors must be finite')
        self.target_name = target_name
        self.scale = float(scale)
        self.A = nn.Parameter(A.clone())
        self.B = nn.Parameter(B.clone())

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.rank * (self.d + self.k)

    def extra_repr(self) -> str:
        return f'{self.target_name}: d={self.d}, k={self.k}, r={self.rank}, scale={self.scale}'


def check_rank(target_name: str, d: int, k: int, r: int, max_rank_fraction: Optional[float] = None) -> None:
    if not (1 <= r <= min(d, k)):
        raise LoraRankError(f'{target_name}: rank {r} outside [1, {min(d, k)}] for a {d}x{k} weight')
    if max_rank_fraction is not None and r > max_rank_fraction * min(d, k):
        raise LoraRankError(
            f'{target_name}: rank {r} exceeds {max_rank_fraction} * min({d}, {k}); '
            'lower the rank or the adapter is not low-rank'
        )


def init_adapter(
    target_name: str,
    d: int,
    k: int,
    r: int,
    seed: int,
    scale: float = 1.0,
    max_rank_fraction: Optional[float] = None,
    dtype: torch.dtype = torch.float32,
) -> LoraAdapter:
    """A ~ N(0, 1/sqrt(r)) from a seeded generator, B = 0, so the delta starts at exactly zero."""
    check_rank(target_name, d, k, r, max_rank_fraction)
    g = torch.Generator().manual_seed(seed)
    A = torch.randn(d, r, generator=g, dtype=dtype) / math.sqrt(r)
    B = torch.zeros(r, k, dtype=dtype)
    return LoraAdapter(target_name, A, B, scale=scale)


def delta(adapter: LoraAdapter) -> torch.Tensor:
    return adapter.scale * (adapter.A @ adapter.B)


def _check_base(W0: torch.Tensor, adapter: LoraAdapter) -> None:
    if W0.dim() != 2 or tuple(W0.shape) != (adapter.d, adapter.k):
        raise LoraShapeError(
            f'{adapter.target_name}: base weight {tuple(W0.shape)} does not match '
            f'adapter ({adapter.d}, {adapter.k})'
        )


def adapted_forward(W0: torch.Tensor, adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """
    (W0 + scale·A@B) applied to x without materialising the delta.

    Args:
        W0: frozen d×k base weight
        adapter: LoRA factors for W0
        x: a k-vector, or an n×k batch of row vectors

    Returns:
        d-vector, or n×d batch
    """
    _check_base(W0, adapter)
    if x.shape[-1] != adapter.k or x.dim() not in (1, 2):
        raise LoraShapeError(f'{adapter.target_name}: input {tuple(x.shape)} incompatible with k={adapter.k}')
    W0 = W0.detach()
    if x.dim() == 1:
        return W0 @ x + adapter.scale * (adapter.A @ (adapter.B @ x))
    return x @ W0.T + adapter.scale * ((x @ adapter.B.T) @ adapter.A.T)


def merge(W0: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    _check_base(W0, adapter)
    return W0 + delta(adapter)


# ==========================================
# MODULE WRAPPERS
# ==========================================

def weight_shape(module: nn.Module) -> tuple[int, int]:
    """(d, k) of the linear map a Linear/Conv2d weight represents."""
    w = module.weight
    return w.shape[0], int(w[0].numel())


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        self.base = base
        self.adapter = adapter
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        a = self.adapter
        return self.base(x) + a.scale * F.linear(F.linear(x, a.B), a.A)

    def merged_weight(self) -> torch.Tensor:
        return merge(self.base.weight, self.adapter)


class LoraConv2d(nn.Module):
    """Factored conv: a rank-r conv with B's kernels, then a 1×1 conv with A."""

    def __init__(self, base: nn.Conv2d, adapter: LoraAdapter):
        super().__init__()
        if base.groups != 1:
            raise LoraShapeError(f'{adapter.target_name}: grouped convolutions are not adaptable')
        self.base = base
        self.adapter = adapter
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        a, conv = self.adapter, self.base
        kernels = a.B.view(a.rank, *conv.weight.shape[1:])
        low = F.conv2d(x, kernels, stride=conv.stride, padding=conv.padding, dilation=conv.dilation)
        return conv(x) + a.scale * F.conv2d(low, a.A.view(a.d, a.rank, 1, 1))

    def merged_weight(self) -> torch.Tensor:
        flat = self.base.weight.reshape(self.adapter.d, self.adapter.k)
        return merge(flat, self.adapter).view_as(self.base.weight)


LoraWrapped = Union[LoraLinear, LoraConv2d]


def adaptable_weights(module: nn.Module, prefix: str = '') -> dict[str, nn.Module]:
    """Named Linear/Conv2d submodules that can take an adapter."""
    found = {}
    for name, child in module.named_modules(prefix=prefix):
        if isinstance(child, (LoraLinear, LoraConv2d)):
            continue
        if isinstance(child, (nn.Linear, nn.Conv2d)) and not name.endswith('.base'):
            if isinstance(child, nn.Conv2d) and child.groups != 1:
                continue
            found[name] = child
    return found


def _set_submodule(root: nn.Module, dotted: str, new: nn.Module) -> None:
    parent_name, _, child_name = dotted.rpartition('.')
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child_name, new)


def attach_adapters(
    root: nn.Module,
    targets: Iterable[str],
    rank_for,
    seed: int,
    scale: float = 1.0,
    max_rank_fraction: Optional[float] = 0.5,
) -> dict[str, LoraAdapter]:
    """
    Wrap each named target of ``root`` in place with a zero-initialised adapter.

    ``rank_for`` maps a target name to its rank. Every adapter must be
    parameter-efficient: r·(d+k) < d·k.
    """
    available = adaptable_weights(root) if not hasattr(root, 'adaptable_weights') else root.adaptable_weights()
    targets = list(targets)
    if not targets:
        # "every weight": skip the ones too narrow to take the configured rank
        for name in sorted(available):
            d, k = weight_shape(available[name])
            r = rank_for(name)
            try:
                check_rank(name, d, k, r, max_rank_fraction)
            except LoraRankError:
                logger.debug('weight too narrow for an adapter', extra={'target': name, 'd': d, 'k': k})
                continue
            if r * (d + k) < d * k:
                targets.append(name)

    adapters = {}
    for index, name in enumerate(targets):
        if name not in available:
            raise LoraShapeError(f'unknown adapter target {name!r}; known: {sorted(available)}')
        base = available[name]
        d, k = weight_shape(base)
        r = rank_for(name)
        adapter = init_adapter(
            name, d, k, r, seed=seed + index, scale=scale,
            max_rank_fraction=max_rank_fraction, dtype=base.weight.dtype,
        )
        if adapter.parameter_count >= d * k:
            raise LoraRankError(
                f'{name}: adapter has {adapter.parameter_count} parameters, '
                f'not fewer than the {d * k} of the base weight'
            )
        wrapper = LoraLinear(base, adapter) if isinstance(base, nn.Linear) else LoraConv2d(base, adapter)
        _set_submodule(root, name, wrapper)
        adapters[name] = adapter
        logger.debug('adapter attached', extra={'target': name, 'd': d, 'k': k, 'rank': r})
    return adapters


def attached_adapters(root: nn.Module) -> dict[str, LoraAdapter]:
    return {
        name: child.adapter
        for name, child in root.named_modules()
        if isinstance(child, (LoraLinear, LoraConv2d))
    }


def adapter_state(adapters: dict[str, LoraAdapter]) -> dict[str, torch.Tensor]:
    state = {}
    for name, adapter in adapters.items():
        state[f'lora.{name}.A'] = adapter.A.detach().contiguous()
        state[f'lora.{name}.B'] = adapter.B.detach().contiguous()
    return state


def load_adapter_state(adapters: dict[str, LoraAdapter], state: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, adapter in adapters.items():
            try:
                A, B = state[f'lora.{name}.A'], state[f'lora.{name}.B']
            except KeyError as exc:
                raise LoraShapeError(f'checkpoint has no factors for {name!r}') from exc
            if A.shape != adapter.A.shape or B.shape != adapter.B.shape:
                raise LoraShapeError(f'{name}: checkpoint factors do not match the attached adapter')
            adapter.A.copy_(A)
            adapter.B.copy_(B)
