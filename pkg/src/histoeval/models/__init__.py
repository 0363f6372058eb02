from .zoo import (
    ARCHITECTURES,
    ArchitectureSpec,
    ModelHandle,
    build_botnet,
    build_model,
    forward,
    fuse_hybrid,
    penultimate_features,
    to_batch,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ARCHITECTURES", "ArchitectureSpec", "ModelHandle", "build_botnet", "build_model", "forward",
    "fuse_hybrid", "penultimate_features", "to_batch", "load_checkpoint", "save_checkpoint",
]
