"""The complete network: backbone, global branch, local branch(es), fusion."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .backbone import Backbone, BackboneSpec
from .errors import ConfigError
from .fusion import DESCRIPTOR_DIM, FUSION_MODES, OrthogonalFusion
from .global_branch import GemConfig, GlobalBranch
from .local_branch import LocalBranch, MultiAtrousConfig

FUSION_LOCATIONS = ("global_only", "f4_only", "f3_only", "both_f3_f4")
POOLS = ("gem", "average")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    dim: int = 64  # C: local-branch width and global descriptor length
    gem: GemConfig = field(default_factory=GemConfig)
    dilation_rates: tuple = (3, 6, 9)
    mid_channels: int | None = None
    kernel_size: int = 3
    fusion_location: str = "f3_only"
    global_pool: str = "gem"
    fusion_pool: str = "average"
    fusion_mode: str = "orthogonal"
    multi_atrous: bool = True
    self_attention: bool = True
    freeze_bn: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.fusion_location not in FUSION_LOCATIONS:
            raise ConfigError(f"unknown fusion_location {self.fusion_location!r}")
        if self.global_pool not in POOLS or self.fusion_pool not in POOLS:
            raise ConfigError(f"pooling must be one of {POOLS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.dim <= 0:
            raise ConfigError("model.dim must be positive")

    @property
    def atrous(self):
        return MultiAtrousConfig(self.dim, self.dilation_rates, self.mid_channels, self.kernel_size)

    def to_dict(self):
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone"] = BackboneSpec(**d["backbone"])
        d["gem"] = GemConfig(**d["gem"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class DOLG(nn.Module):
    """Single-stage retrieval network.

    ``forward`` maps a (B, 3, H, W) batch to un-normalized (B, 512)
    descriptors; normalization is left to the loss and to extraction.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        spec = cfg.backbone
        self.backbone = Backbone(spec, freeze_bn=cfg.freeze_bn)
        self.global_branch = GlobalBranch(spec.stage4_channels, cfg.dim, cfg.global_pool, cfg.gem)
        loc = cfg.fusion_location
        self.local3 = self.local4 = None
        if loc in ("f3_only", "both_f3_f4"):
            self.local3 = LocalBranch(spec.stage3_channels, cfg.atrous, cfg.multi_atrous, cfg.self_attention)
        if loc in ("f4_only", "both_f3_f4"):
            self.local4 = LocalBranch(spec.stage4_channels, cfg.atrous, cfg.multi_atrous, cfg.self_attention)
        if loc == "global_only":
            self.fusion = None
            self.head = nn.Linear(cfg.dim, DESCRIPTOR_DIM)
        else:
            num_local = 2 if loc == "both_f3_f4" else 1
            self.fusion = OrthogonalFusion(cfg.dim, cfg.fusion_mode, cfg.fusion_pool, cfg.gem, num_local)

    def features(self, images):
        """All intermediate tensors, keyed by name (for debugging and tests)."""
        f3, f4 = self.backbone(images)
        out = {"f3": f3, "f4": f4, "f_g": self.global_branch(f4), "f_l": [], "attention": []}
        for branch, src in ((self.local3, f3), (self.local4, f4)):
            if branch is not None:
                f_l, att = branch(src)
                out["f_l"].append(f_l)
                out["attention"].append(att)
        if self.fusion is None:
            out["descriptor"] = self.head(out["f_g"])
        else:
            out["descriptor"] = self.fusion(out["f_l"], out["f_g"])
        return out

    def forward(self, images):
        return self.features(images)["descriptor"]


def build_model(cfg: ModelConfig, seed=None, dtype=torch.float32):
    if seed is not None:
        torch.manual_seed(seed)
    return DOLG(cfg).to(dtype)
