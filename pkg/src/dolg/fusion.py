"""Orthogonal fusion of local feature maps with the global descriptor.

Every local point is split into its projection onto ``f_g`` and the residual
orthogonal to it. The residual map, with ``f_g`` appended to every point, is
pooled and mapped to the final 512-d descriptor.

Shapes: local tensors are (B, C, H, W), global descriptors are (B, C).
"""

import torch
from torch import nn

from .errors import ConfigError, DegenerateGlobalError, ShapeError
from .global_branch import GemConfig, spatial_pool

DESCRIPTOR_DIM = 512
FUSION_MODES = ("orthogonal", "concatenation", "hadamard")
DEGENERATE_NORM_SQ = 1e-12


def _norm_sq(f_g, stable):
    norm_sq = (f_g * f_g).sum(dim=-1)
    if stable:
        return norm_sq + DEGENERATE_NORM_SQ
    if (norm_sq < DEGENERATE_NORM_SQ).any():
        raise DegenerateGlobalError(
            f"global descriptor squared norm {norm_sq.min().item():.3g} is below {DEGENERATE_NORM_SQ}"
        )
    return norm_sq


def project(point, f_g, stable=False):
    """Projection of ``point`` onto ``f_g`` along the last axis."""
    if point.shape[-1] != f_g.shape[-1]:
        raise ShapeError(f"point has {point.shape[-1]} dims, global descriptor has {f_g.shape[-1]}")
    coeff = (point * f_g).sum(dim=-1, keepdim=True) / _norm_sq(f_g, stable).unsqueeze(-1)
    return coeff * f_g


def orthogonal_component(f_l, f_g, stable=False):
    """Remove from each spatial position of ``f_l`` its projection onto ``f_g``."""
    if f_l.dim() != 4 or f_g.dim() != 2:
        raise ShapeError(f"expected f_l (B,C,H,W) and f_g (B,C), got {tuple(f_l.shape)} and {tuple(f_g.shape)}")
    if f_l.shape[:2] != f_g.shape:
        raise ShapeError(f"f_l has {f_l.shape[1]} channels, f_g has {f_g.shape[1]}")
    dots = torch.einsum("bchw,bc->bhw", f_l, f_g)
    coeff = dots / _norm_sq(f_g, stable)[:, None, None]
    return f_l - coeff.unsqueeze(1) * f_g[:, :, None, None]


def aggregate(tensor, method="average", gem=GemConfig()):
    return spatial_pool(tensor, method, gem.p, gem.epsilon)


def append_global(tensor, f_g):
    """Concatenate ``f_g`` to every spatial point: (B,C',H,W) -> (B,C'+C,H,W)."""
    h, w = tensor.shape[-2:]
    return torch.cat([tensor, f_g[:, :, None, None].expand(-1, -1, h, w)], dim=1)


def pooled_orthogonal_form(f_l, f_g, fc, stable=False):
    """Pool first, then remove the projection: valid shortcut for average pooling."""
    pooled = f_l.mean(dim=(-2, -1))
    return fc(torch.cat([pooled - project(pooled, f_g, stable), f_g], dim=-1))


class OrthogonalFusion(nn.Module):
    """Fuse one or more local tensors with ``f_g`` into a 512-d descriptor.

    ``num_local`` > 1 covers fusing several local branches at once: each
    contributes its own pooled part, and ``f_g`` is appended once. Pooling
    is per channel, so pooling each part separately equals pooling the
    channel-concatenated tensor when spatial sizes match.

    During training a tiny constant is added to ``|f_g|^2``; in eval mode a
    near-zero ``f_g`` raises ``DegenerateGlobalError``.
    """

    def __init__(self, channels, mode="orthogonal", pool="average", gem=GemConfig(),
                 num_local=1, out_dim=DESCRIPTOR_DIM):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.mode = mode
        self.pool = pool
        self.gem = gem
        parts = num_local if mode == "hadamard" else num_local + 1
        self.fc = nn.Linear(parts * channels, out_dim, bias=True)

    def forward(self, f_ls, f_g):
        if isinstance(f_ls, torch.Tensor):
            f_ls = [f_ls]
        stable = self.training
        pooled = []
        for f_l in f_ls:
            if f_l.shape[:2] != f_g.shape:
                raise ShapeError(f"f_l has shape {tuple(f_l.shape)}, f_g has {tuple(f_g.shape)}")
            if self.mode == "orthogonal":
                pooled.append(aggregate(orthogonal_component(f_l, f_g, stable), self.pool, self.gem))
            elif self.mode == "concatenation":
                pooled.append(aggregate(f_l, self.pool, self.gem))
            else:
                pooled.append(aggregate(f_l, self.pool, self.gem) * f_g)
        if self.mode != "hadamard":
            # f_g is constant over space; pool it through the same operator
            # to honour the GeM clamp as well.
            pooled.append(aggregate(f_g[:, :, None, None], self.pool, self.gem))
        return self.fc(torch.cat(pooled, dim=-1))
