"""Feature extractor G: a fixed statistics front end followed by a small MLP."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from upda.dataset import ContractViolation, PointCloudSample, pairwise_sq_dists

STAT_DIM = 64
NN_QUANTILES = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)
ENERGY_QUANTILES = (0.05, 0.15, 0.25, 0.35, 0.5, 0.65, 0.75, 0.85, 0.95, 0.99)
RADIAL_BINS = 16
RADIAL_MAX = 0.9
N_NEIGHBOURS = 8
DTYPE = torch.float64
# standardised inputs are clamped to +-INPUT_CLIP
INPUT_CLIP = 5.0


def _moments(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    centred = x - mean
    std = np.where(np.ptp(x, axis=0) > 0, np.sqrt((centred**2).mean(axis=0)), 0.0)
    safe = np.where(std > 0, std, 1.0)
    skew = np.where(std > 0, (centred**3).mean(axis=0) / safe**3, 0.0)
    return np.concatenate([mean, std, skew])


def extract_raw_features(sample: PointCloudSample) -> np.ndarray:
    """64-dim permutation-invariant descriptor of a coloured cloud.

    Layout: coordinate mean/std/skew (9), colour mean/std/skew (9), radial
    histogram (16), nearest-neighbour distance quantiles (8), colour-gradient
    energy mean/std/quantiles (12), local roughness mean/std/quantiles (10).
    Points are put in lexicographic order first, which makes the output
    bitwise independent of input ordering.
    """
    points, colors = sample.points, sample.colors
    if not (np.isfinite(points).all() and np.isfinite(colors).all()):
        raise ContractViolation("non-finite point or colour values")
    if points.shape[0] < 2:
        raise ContractViolation("need at least two points")
    both = np.concatenate([points, colors], axis=1)
    order = np.lexsort(both.T[::-1])
    points, colors = points[order], colors[order]

    radial = np.linalg.norm(points - points.mean(axis=0), axis=1)
    hist = np.histogram(np.minimum(radial, RADIAL_MAX), bins=RADIAL_BINS, range=(0.0, RADIAL_MAX))[0]
    hist = hist / points.shape[0]

    d = pairwise_sq_dists(points, points)
    np.fill_diagonal(d, np.inf)
    k = min(N_NEIGHBOURS, points.shape[0] - 1)
    nbr = np.argpartition(d, k - 1, axis=1)[:, :k]
    nbr.sort(axis=1)
    nn_dist = np.sqrt(d.min(axis=1))

    energy = ((colors[:, None, :] - colors[nbr]) ** 2).sum(axis=2).mean(axis=1)
    roughness = np.linalg.norm(points - points[nbr].mean(axis=1), axis=1)

    return np.concatenate([
        _moments(points),
        _moments(colors),
        hist,
        np.quantile(nn_dist, NN_QUANTILES),
        [energy.mean(), energy.std()],
        np.quantile(energy, ENERGY_QUANTILES),
        [roughness.mean(), roughness.std()],
        np.quantile(roughness, NN_QUANTILES),
    ])


class Backbone(nn.Module):
    """Standardise and clamp the stat vector, then 64 -> 256 -> 256 -> d with tanh.

    The clamp keeps descriptors that are near-constant on the fitting data
    (e.g. an almost empty radial bin) from saturating the first layer on a
    shifted domain.
    """

    def __init__(self, in_dim: int = STAT_DIM, hidden: int = 256, out_dim: int = 128, clip: float = INPUT_CLIP):
        super().__init__()
        self.in_dim, self.out_dim, self.clip = in_dim, out_dim, clip
        self.fc1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.fc3 = nn.Linear(hidden, out_dim, dtype=DTYPE)
        self.register_buffer("input_mean", torch.zeros(in_dim, dtype=DTYPE))
        self.register_buffer("input_scale", torch.ones(in_dim, dtype=DTYPE))

    def fit_scaler(self, stats: np.ndarray) -> None:
        stats = np.asarray(stats, dtype=np.float64)
        std = stats.std(axis=0)
        self.input_mean.copy_(torch.from_numpy(stats.mean(axis=0)))
        self.input_scale.copy_(torch.from_numpy(np.where(std > 1e-12, std, 1.0)))

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        if stats.shape[-1] != self.in_dim:
            raise ContractViolation(f"expected {self.in_dim}-dim stat vectors, got {stats.shape[-1]}")
        z = self.standardise(stats)
        z = torch.tanh(self.fc1(z))
        z = torch.tanh(self.fc2(z))
        return self.fc3(z)

    def standardise(self, stats: torch.Tensor) -> torch.Tensor:
        return ((stats - self.input_mean) / self.input_scale).clamp(-self.clip, self.clip)

    def lipschitz_bound(self, stats: torch.Tensor) -> torch.Tensor:
        """Upper bound on ||G(x)|| from operator norms (tanh is 1-Lipschitz, tanh(0)=0)."""
        z = self.standardise(stats)
        bound = torch.linalg.vector_norm(z, dim=-1)
        for layer in (self.fc1, self.fc2, self.fc3):
            bound = torch.linalg.matrix_norm(layer.weight, ord=2) * bound + torch.linalg.vector_norm(layer.bias)
        return bound


def init_params(module: nn.Module, seed: int, scheme: str = "uniform_fanin") -> nn.Module:
    """Initialise every parameter of ``module`` in registration order.

    ``uniform_fanin`` draws U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in the
    input width of the owning layer; non-Linear owners declare theirs in a
    ``fan_in_of`` dict. ``zeros`` is for tests.
    """
    if scheme not in ("uniform_fanin", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for sub in module.modules():
            for name, p in sub.named_parameters(recurse=False):
                if scheme == "zeros":
                    p.zero_()
                    continue
                fan_in = sub.in_features if isinstance(sub, nn.Linear) else sub.fan_in_of[name]
                bound = 1.0 / np.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)
    return module


def build_backbone(seed: int, out_dim: int = 128, scheme: str = "uniform_fanin") -> Backbone:
    return init_params(Backbone(out_dim=out_dim), seed, scheme)
