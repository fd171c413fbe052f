"""Local branch: multi-atrous block followed by self-attention, applied to f3."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError

NORM_EPS = 1e-6


@dataclass(frozen=True)
class MultiAtrousConfig:
    out_channels: int = 64
    dilation_rates: tuple = (3, 6, 9)
    mid_channels: int | None = None  # defaults to out_channels // 2
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if len(self.dilation_rates) != 3 or min(self.dilation_rates) <= 0:
            raise ConfigError(f"need exactly 3 positive dilation rates, got {self.dilation_rates}")
        if self.out_channels <= 0:
            raise ConfigError("out_channels must be positive")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if self.mid_channels is not None and self.mid_channels <= 0:
            raise ConfigError("mid_channels must be positive")

    @property
    def mid(self):
        return self.mid_channels or max(self.out_channels // 2, 1)


class MultiAtrous(nn.Module):
    def __init__(self, in_channels, cfg: MultiAtrousConfig):
        super().__init__()
        k, mid = cfg.kernel_size, cfg.mid
        self.dilated = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, mid, k, padding=rate * (k // 2), dilation=rate, bias=False),
                nn.BatchNorm2d(mid),
                nn.ReLU(inplace=True),
            )
            for rate in cfg.dilation_rates
        )
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, mid, 1),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Conv2d(4 * mid, cfg.out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h == 0 or w == 0:
            raise InvalidInputError(f"multi-atrous input has empty spatial dims {h}x{w}")
        branches = [branch(x) for branch in self.dilated]
        branches.append(self.image_pool(x).expand(-1, -1, h, w))
        return self.project(torch.cat(branches, dim=1))


class SelfAttention(nn.Module):
    """1x1 conv-bn, channel L2 normalization, SoftPlus attention modulation.

    Returns ``(features * attention, attention)`` with attention of shape
    (B, 1, H, W). The attention logits are computed from the conv-bn output
    before normalization.
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        self.bn = nn.BatchNorm2d(channels)
        self.attention = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        x = self.bn(self.conv(x))
        att = F.softplus(self.attention(x))
        normed = x / x.norm(dim=1, keepdim=True).clamp(min=NORM_EPS)
        return normed * att, att


class LocalBranch(nn.Module):
    """f3 -> f_l. Either block can be switched off for ablations.

    With the multi-atrous block off a 1x1 conv maps the input to C channels;
    with attention off the block output is returned unmodulated.
    """

    def __init__(self, in_channels, cfg: MultiAtrousConfig, multi_atrous=True, self_attention=True):
        super().__init__()
        self.cfg = cfg
        if multi_atrous:
            self.atrous = MultiAtrous(in_channels, cfg)
        else:
            self.atrous = nn.Conv2d(in_channels, cfg.out_channels, 1)
        self.attn = SelfAttention(cfg.out_channels) if self_attention else None

    def forward(self, f3):
        x = self.atrous(f3)
        if self.attn is None:
            return x, None
        return self.attn(x)
