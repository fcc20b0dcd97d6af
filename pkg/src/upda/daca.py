"""Coarse-grained alignment: weighted pairwise ranking and weighted MMD.

Pairs are all ordered ``(i, j)``, ``i != j``, inside a mini-batch. A source
pair carries the label ``y_i > y_j`` and the weight ``sigmoid(|y_i - y_j|)``;
target pairs are unlabeled and uniformly weighted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from upda.backbone import DTYPE
from upda.dataset import ContractViolation

EPS = 1e-7


@dataclass(frozen=True)
class RankPairs:
    """Index arrays ``i``/``j`` with per-pair ``label`` and ``weight``."""

    i: np.ndarray
    j: np.ndarray
    label: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    def swapped(self) -> "RankPairs":
        """Same pairs with roles exchanged; labels follow the new order."""
        return RankPairs(self.j, self.i, 1.0 - self.label, self.weight)


@dataclass(frozen=True)
class KernelConfig:
    """Sum of Gaussian kernels ``exp(-||a-b||^2 / (m * base))`` over multipliers ``m``.

    ``base`` defaults to the median pairwise squared distance of the pooled
    inputs, treated as a constant (no gradient).
    """

    multipliers: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    base: float | None = None

    def __post_init__(self):
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ContractViolation("kernel bandwidth multipliers must be positive")
        if self.base is not None and self.base <= 0:
            raise ContractViolation("kernel base bandwidth must be positive")


def ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = i != j
    return i[keep], j[keep]


def pair_weight(y_i, y_j):
    return 1.0 / (1.0 + np.exp(-np.abs(np.asarray(y_i, dtype=np.float64) - np.asarray(y_j, dtype=np.float64))))


def source_pairs(y: Sequence[float]) -> RankPairs:
    y = np.asarray(y, dtype=np.float64)
    i, j = ordered_pairs(len(y))
    return RankPairs(i, j, (y[i] > y[j]).astype(np.float64), pair_weight(y[i], y[j]))


def target_pairs(n: int) -> RankPairs:
    i, j = ordered_pairs(n)
    return RankPairs(i, j, np.full(len(i), np.nan), np.ones(len(i)))


def rank_feature(f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
    if f_i.shape != f_j.shape:
        raise ContractViolation(f"rank features need equal shapes, got {tuple(f_i.shape)} and {tuple(f_j.shape)}")
    return f_i - f_j


def pair_features(features: torch.Tensor, pairs: RankPairs) -> torch.Tensor:
    return rank_feature(features[torch.from_numpy(pairs.i)], features[torch.from_numpy(pairs.j)])


class RankingHead(nn.Module):
    """Fully connected layers ending in 2 logits; logit 0 is "i better than j"."""

    def __init__(self, in_dim: int = 128, hidden: Sequence[int] = ()):
        super().__init__()
        dims = [in_dim, *hidden, 2]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b, dtype=DTYPE), nn.Tanh()]
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, f_rank: torch.Tensor) -> torch.Tensor:
        return self.net(f_rank)


def rank_probability(f_rank: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return torch.softmax(head(f_rank), dim=-1)[..., 0]


def weighted_rank_bce(prob: torch.Tensor, label, weight, eps: float = EPS) -> torch.Tensor:
    """Weighted binary cross-entropy normalised by the total weight."""
    label = torch.as_tensor(label, dtype=prob.dtype)
    weight = torch.as_tensor(weight, dtype=prob.dtype)
    p = prob.clamp(eps, 1.0 - eps)
    ll = label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p)
    return -(weight * ll).sum() / weight.sum()


def loss_d_rank(features: torch.Tensor, pairs: RankPairs, head: nn.Module, eps: float = EPS) -> torch.Tensor:
    if len(pairs) == 0:
        raise ContractViolation("ranking loss needs at least one pair")
    prob = rank_probability(pair_features(features, pairs), head)
    return weighted_rank_bce(prob, pairs.label, pairs.weight, eps)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return d.clamp_min(0.0)


def median_bandwidth(*blocks: torch.Tensor) -> float:
    with torch.no_grad():
        pooled = torch.cat(blocks)
        d = _sq_dists(pooled, pooled)
        off = d[~torch.eye(len(pooled), dtype=torch.bool)]
        med = float(off.median()) if off.numel() else 0.0
    return med if med > 0 else 1.0


def multi_kernel(a: torch.Tensor, b: torch.Tensor, multipliers: Sequence[float], base: float) -> torch.Tensor:
    d = _sq_dists(a, b)
    return sum(torch.exp(-d / (m * base)) for m in multipliers)


def loss_d_mmd(
    source_rank: torch.Tensor,
    source_weight,
    target_rank: torch.Tensor,
    kernel: KernelConfig = KernelConfig(),
    target_weight=None,
) -> torch.Tensor:
    """Squared RKHS distance between weighted source and uniform target mean embeddings."""
    if len(source_rank) < 2 or len(target_rank) < 2:
        raise ContractViolation("weighted MMD needs at least two pairs per domain")
    ws = torch.as_tensor(source_weight, dtype=source_rank.dtype)
    wt = (torch.ones(len(target_rank), dtype=target_rank.dtype) if target_weight is None
          else torch.as_tensor(target_weight, dtype=target_rank.dtype))
    if float(ws.sum()) <= 0 or float(wt.sum()) <= 0:
        raise ContractViolation("pair weights must not all be zero")
    ws, wt = ws / ws.sum(), wt / wt.sum()
    base = kernel.base if kernel.base is not None else median_bandwidth(source_rank, target_rank)
    k_ss = multi_kernel(source_rank, source_rank, kernel.multipliers, base)
    k_st = multi_kernel(source_rank, target_rank, kernel.multipliers, base)
    k_tt = multi_kernel(target_rank, target_rank, kernel.multipliers, base)
    return ws @ k_ss @ ws - 2.0 * ws @ k_st @ wt + wt @ k_tt @ wt


class DacaLoss(NamedTuple):
    total: torch.Tensor
    rank: torch.Tensor
    mmd: torch.Tensor


def loss_daca(
    f_source: torch.Tensor,
    y_source,
    f_target: torch.Tensor,
    head: nn.Module,
    nu: float = 1.0,
    kernel: KernelConfig = KernelConfig(),
) -> DacaLoss:
    if len(f_source) < 2 or len(f_target) < 2:
        raise ContractViolation("both batches need at least two samples")
    sp = source_pairs(y_source)
    tp = target_pairs(len(f_target))
    rank = loss_d_rank(f_source, sp, head)
    mmd = loss_d_mmd(pair_features(f_source, sp), sp.weight, pair_features(f_target, tp), kernel)
    return DacaLoss(rank + nu * mmd, rank, mmd)
