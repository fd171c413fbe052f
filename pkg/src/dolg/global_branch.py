"""Global branch: GeM pooling of f4 followed by a linear reduction to C dims."""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, InvalidInputError, ShapeError


@dataclass(frozen=True)
class GemConfig:
    p: float = 3.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.p > 0:
            raise ConfigError(f"GeM exponent p must be > 0, got {self.p}")
        if not self.epsilon > 0:
            raise ConfigError(f"GeM epsilon must be > 0, got {self.epsilon}")


def gem_pool(x, p=3.0, eps=1e-6):
    """Generalized-mean pooling over the two trailing (spatial) axes.

    Entries are clamped at ``eps`` before the power. ``p = 1`` reduces to
    the arithmetic mean of the clamped map, large ``p`` approaches the max.
    """
    if p <= 0:
        raise ConfigError(f"GeM exponent p must be > 0, got {p}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("gem_pool received non-finite activations")
    return x.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


def average_pool(x):
    return x.mean(dim=(-2, -1))


def spatial_pool(x, method, p=3.0, eps=1e-6):
    if method == "gem":
        return gem_pool(x, p, eps)
    if method == "average":
        return average_pool(x)
    raise ConfigError(f"unknown pooling method {method!r}")


class GlobalBranch(nn.Module):
    """f4 -> pooled (C4) -> affine (C). No normalization here."""

    def __init__(self, in_channels, out_channels, pool="gem", gem=GemConfig()):
        super().__init__()
        self.pool = pool
        self.gem = gem
        self.reduce = nn.Linear(in_channels, out_channels, bias=True)

    def reduce_global(self, pooled):
        if pooled.shape[-1] != self.reduce.in_features:
            raise ShapeError(f"pooled vector has {pooled.shape[-1]} dims, "
                             f"reduction expects {self.reduce.in_features}")
        return self.reduce(pooled)

    def forward(self, f4):
        return self.reduce_global(spatial_pool(f4, self.pool, self.gem.p, self.gem.epsilon))
