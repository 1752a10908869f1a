"""Patch-wise semantic contrastive losses.

SRC compares, for every sampled patch, its similarity distribution over the
other sampled patches in the source and in the translation (Jensen-Shannon).
hDCE is an InfoNCE-style loss whose negatives are reweighted toward patches
that are semantically close to the query in the source image.

All functions take a single N_p×d embedding set, a B×N_p×d batch, or a list
of either (one per encoder layer; per-layer terms are summed in list order).
"""
import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

from .exceptions import ConfigError, LossInputError

Embeddings = Union[torch.Tensor, Sequence[torch.Tensor]]


def _as_layers(value: Embeddings) -> list[torch.Tensor]:
    if isinstance(value, torch.Tensor):
        return [value]
    return list(value)


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossInputError(f'{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ')
    if a.dim() not in (2, 3):
        raise LossInputError(f'{what}: expected N_p×d or B×N_p×d embeddings, got {tuple(a.shape)}')


def _batch_mean(per_image: torch.Tensor) -> torch.Tensor:
    return per_image.mean() if per_image.dim() else per_image


def similarity_distribution(z: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of the Gram matrix z z^T, self term included."""
    if not torch.isfinite(z).all():
        raise LossInputError('similarity_distribution: embeddings contain non-finite values')
    return torch.softmax(z @ z.transpose(-1, -2), dim=-1)


def jsd(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence in nats along the last axis; 0·log 0 = 0."""
    if P.shape != Q.shape:
        raise LossInputError(f'jsd: shapes {tuple(P.shape)} and {tuple(Q.shape)} differ')
    if (P < 0).any() or (Q < 0).any():
        raise LossInputError('jsd: probability vectors must be non-negative')
    M = 0.5 * (P + Q)
    kl_pm = (torch.xlogy(P, P) - torch.xlogy(P, M)).sum(dim=-1)
    kl_qm = (torch.xlogy(Q, Q) - torch.xlogy(Q, M)).sum(dim=-1)
    return 0.5 * kl_pm + 0.5 * kl_qm


def src_loss(f_S: Embeddings, f_T: Embeddings) -> torch.Tensor:
    """Sum over queries of jsd(S_k, T_k), summed over layers, averaged over the batch."""
    layers_S, layers_T = _as_layers(f_S), _as_layers(f_T)
    if len(layers_S) != len(layers_T):
        raise LossInputError(f'src_loss: {len(layers_S)} source layers vs {len(layers_T)} translated')
    total = None
    for s, t in zip(layers_S, layers_T):
        _check_pair(s, t, 'src_loss')
        term = _batch_mean(jsd(similarity_distribution(s), similarity_distribution(t)).sum(dim=-1))
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class HardNegativeWeights:
    W: torch.Tensor
    gamma: float


def hard_negative_weights(F_S: torch.Tensor, gamma: float) -> HardNegativeWeights:
    """W = row-softmax(F F^T / gamma) with the diagonal masked out."""
    if not gamma > 0:
        raise LossInputError(f'gamma must be positive, got {gamma}')
    n = F_S.shape[-2]
    if n < 2:
        raise LossInputError('hard negatives need at least two patches')
    M = F_S @ F_S.transpose(-1, -2) / gamma
    eye = torch.eye(n, dtype=torch.bool, device=F_S.device)
    return HardNegativeWeights(torch.softmax(M.masked_fill(eye, float('-inf')), dim=-1), float(gamma))


def _hdce_layer(f_T: torch.Tensor, f_S: torch.Tensor, W: torch.Tensor, tau: float) -> torch.Tensor:
    n = f_T.shape[-2]
    logits = f_T @ f_S.transpose(-1, -2) / tau
    positive = torch.diagonal(logits, dim1=-2, dim2=-1)
    eye = torch.eye(n, dtype=torch.bool, device=f_T.device)
    # W is a constant reweighting; log sum_j W_kj exp(l_kj) over j != k
    log_W = torch.log(W.detach().masked_fill(eye, 1.0))
    weighted = (logits + log_W).masked_fill(eye, float('-inf'))
    negative = math.log(n - 1) + torch.logsumexp(weighted, dim=-1)
    return _batch_mean((negative - positive).mean(dim=-1))


def hdce_loss(f_T: Embeddings, f_S: Embeddings, W, tau: float = 0.07) -> torch.Tensor:
    """
    Mean over queries of -log R with

        R_k = exp(f_T[k]·f_S[k]/tau) / (N · sum_{j!=k} W_kj exp(f_T[k]·f_S[j]/tau)),  N = N_p - 1

    ``W`` is a HardNegativeWeights (or raw tensor), or a list of them per layer.
    """
    if not tau > 0:
        raise LossInputError(f'tau must be positive, got {tau}')
    layers_T, layers_S = _as_layers(f_T), _as_layers(f_S)
    weights = list(W) if isinstance(W, (list, tuple)) else [W]
    if not (len(layers_T) == len(layers_S) == len(weights)):
        raise LossInputError('hdce_loss: layer counts of f_T, f_S and W differ')
    total = None
    for t, s, w in zip(layers_T, layers_S, weights):
        _check_pair(t, s, 'hdce_loss')
        w = w.W if isinstance(w, HardNegativeWeights) else w
        if w.shape[-2:] != (t.shape[-2], t.shape[-2]):
            raise LossInputError(f'hdce_loss: weight matrix {tuple(w.shape)} does not match N_p={t.shape[-2]}')
        if t.shape[-2] < 2:
            raise LossInputError('hdce_loss: need at least one negative per query')
        term = _hdce_layer(t, s, w, tau)
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class RampSchedule:
    ramp_steps: int = 12000

    def __post_init__(self):
        if self.ramp_steps < 0:
            raise ConfigError('ramp_steps must be non-negative')

    def weight(self, step: int) -> float:
        if step < 0:
            raise ConfigError(f'step must be non-negative, got {step}')
        if self.ramp_steps == 0:
            return 1.0
        return min(step / self.ramp_steps, 1.0)


def ramp_weight(schedule: RampSchedule, step: int) -> float:
    return schedule.weight(step)
