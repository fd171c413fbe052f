"""Single-stage image retrieval with orthogonal fusion of local and global features."""

from .fusion import DESCRIPTOR_DIM, OrthogonalFusion, orthogonal_component, project
from .model import DOLG, ModelConfig, build_model

__version__ = "0.1.0"

__all__ = ["DESCRIPTOR_DIM", "DOLG", "ModelConfig", "OrthogonalFusion", "build_model",
           "orthogonal_component", "project"]
