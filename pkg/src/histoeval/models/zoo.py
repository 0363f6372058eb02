"""Architecture registry: specs, builders and the uniform model handle."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from ..errors import CapabilityError, ConfigError, ShapeError
from . import layers as L
from .base import Classifier
from .hybrid import Hybrid
from .inception import InceptionV3
from .resnet import ResNetTrunk, botnet_fmap
from .vit import ConvStem, VisionTransformer

ARCHITECTURES = ("resnet50", "botnet50", "inception_v3", "vit", "vit_c", "hybrid")

# Widths chosen so the default builds land on the published parameter budgets
# (2 classes, 96x96 input).
VIT_DEFAULTS = dict(width=288, depth=12, heads=12, mlp_dim=1056)
VIT_C_DEFAULTS = dict(width=1608, depth=3, heads=12)
RESNET_NECK = 512


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one classifier.

    Optional size knobs default to the reference configuration when ``None``:
    ``width`` is the base channel width (ResNet/BoTNet) or token width (ViT);
    ``scale`` multiplies Inception widths and the ViT_C stem widths.
    """

    name: str
    n_classes: int = 2
    input_size: int = 96
    sub_specs: tuple["ArchitectureSpec", "ArchitectureSpec"] | None = None
    width: int | None = None
    depth: int | None = None
    heads: int | None = None
    mlp_dim: int | None = None
    patch_size: int | None = None
    blocks: tuple[int, ...] | None = None
    scale: float | None = None
    neck_dim: int | None = None

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.name!r}; expected one of {ARCHITECTURES}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.input_size <= 0:
            raise ConfigError("input_size must be positive")
        if self.name == "hybrid":
            if not self.sub_specs or len(self.sub_specs) != 2:
                raise ConfigError("hybrid requires exactly two sub-specs")
            if any(s.name == "hybrid" for s in self.sub_specs):
                raise ConfigError("hybrid sub-specs must be single architectures")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if self.sub_specs:
            d["sub_specs"] = [s.to_dict() for s in self.sub_specs]
        if self.blocks is not None:
            d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchitectureSpec":
        d = dict(d)
        if d.get("sub_specs"):
            d["sub_specs"] = tuple(cls.from_dict(s) for s in d["sub_specs"])
        if d.get("blocks") is not None:
            d["blocks"] = tuple(d["blocks"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


def vit_patch_size(input_size: int) -> int:
    if input_size == 96:
        return 6
    return max(p for p in range(1, 9) if input_size % p == 0)


def to_batch(batch, input_size: int | None = None) -> torch.Tensor:
    """Accept NHWC arrays (as stored in patch records) or NCHW tensors; return NCHW float32."""
    if isinstance(batch, torch.Tensor):
        x = batch.float()
    else:
        arr = np.asarray(batch, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) array, got {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) tensor, got {tuple(x.shape)}")
    if input_size is not None and (x.shape[2] != input_size or x.shape[3] != input_size):
        raise ShapeError(f"model expects {input_size}x{input_size} input, got {x.shape[2]}x{x.shape[3]}")
    return x


@dataclass
class ModelHandle:
    spec: ArchitectureSpec
    module: Classifier
    seed: int
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def feature_dim(self) -> int:
        return self.module.feature_dim

    @property
    def input_size(self) -> int:
        return self.spec.input_size

    @property
    def has_attention(self) -> bool:
        return self.spec.name in ("vit", "vit_c", "botnet50")

    def forward(self, batch) -> torch.Tensor:
        """Logits in inference mode."""
        x = to_batch(batch, self.input_size)
        self.module.eval()
        with torch.no_grad():
            return self.module(x)

    def features(self, batch) -> torch.Tensor:
        x = to_batch(batch, self.input_size)
        self.module.eval()
        with torch.no_grad():
            return self.module.features(x)

    def attention(self, batch) -> torch.Tensor:
        """Topmost-layer attention probabilities, (B, heads, N, N)."""
        if not self.has_attention:
            raise CapabilityError(f"{self.spec.name} exposes no attention maps")
        self.forward(batch)
        return self.module.attention_maps()


def forward(model: ModelHandle, batch) -> torch.Tensor:
    return model.forward(batch)


def penultimate_features(model: ModelHandle, batch) -> torch.Tensor:
    return model.features(batch)


def _build_module(spec: ArchitectureSpec) -> Classifier:
    n, size = spec.n_classes, spec.input_size
    if spec.name == "resnet50":
        return ResNetTrunk(n, size, blocks=spec.blocks or (3, 4, 6, 3), width=spec.width or 64,
                           neck_dim=RESNET_NECK if spec.neck_dim is None else spec.neck_dim)
    if spec.name == "botnet50":
        fmap = botnet_fmap(size)
        if fmap % 2:
            raise ConfigError(f"input size {size} gives odd last-stage map {fmap}; BoTNet needs even")
        return ResNetTrunk(n, size, blocks=spec.blocks or (3, 4, 6, 3), width=spec.width or 64,
                           mhsa_last_stage=True, heads=spec.heads or 4, neck_dim=spec.neck_dim or None)
    if spec.name == "inception_v3":
        if size < InceptionV3.min_input_size:
            raise ConfigError(f"inception_v3 needs input >= {InceptionV3.min_input_size}, got {size}")
        return InceptionV3(n, size, scale=spec.scale or 1.0)
    if spec.name == "vit":
        patch = spec.patch_size or vit_patch_size(size)
        if size % patch:
            raise ConfigError(f"input size {size} not divisible by ViT patch size {patch}")
        dim = spec.width or VIT_DEFAULTS["width"]
        embed = L.Conv2d(3, dim, patch, stride=patch)
        return VisionTransformer(n, size, embed, size // patch, dim, spec.depth or VIT_DEFAULTS["depth"],
                                 spec.heads or VIT_DEFAULTS["heads"], spec.mlp_dim or VIT_DEFAULTS["mlp_dim"])
    if spec.name == "vit_c":
        dim = spec.width or VIT_C_DEFAULTS["width"]
        channels = tuple(max(4, int(round(c * (spec.scale or 1.0)))) for c in (64, 128, 256, 512))
        stem = ConvStem(dim, channels)
        if size % stem.stride:
            raise ConfigError(f"input size {size} not divisible by conv-stem stride {stem.stride}")
        return VisionTransformer(n, size, stem, size // stem.stride, dim, spec.depth or VIT_C_DEFAULTS["depth"],
                                 spec.heads or VIT_C_DEFAULTS["heads"], spec.mlp_dim or 4 * dim)
    raise ConfigError(f"cannot build {spec.name!r} directly")


def build_model(spec: ArchitectureSpec, seed: int = 0) -> ModelHandle:
    """Build a freshly initialized classifier; initialization is a pure function of ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.name == "hybrid":
            s1, s2 = spec.sub_specs
            if s1.input_size != s2.input_size or s1.input_size != spec.input_size:
                raise ConfigError("hybrid branches must share the hybrid input size")
            module = Hybrid(_build_module(s1), _build_module(s2), spec.n_classes)
        else:
            module = _build_module(spec)
    return ModelHandle(spec, module, seed)


def build_botnet(spec: ArchitectureSpec, seed: int = 0) -> ModelHandle:
    if spec.name != "botnet50":
        spec = dataclasses.replace(spec, name="botnet50")
    return build_model(spec, seed)


def fuse_hybrid(m1: ModelHandle, m2: ModelHandle, n_classes: int, seed: int | None = None) -> ModelHandle:
    """Join two built models at their penultimate features (trained jointly afterwards)."""
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    if m1.spec.name == "hybrid" or m2.spec.name == "hybrid":
        raise ConfigError("hybrid branches must be single architectures")
    if m1.input_size != m2.input_size:
        raise ConfigError("hybrid branches must share the input size")
    seed = m1.seed if seed is None else seed
    spec = ArchitectureSpec("hybrid", n_classes, m1.input_size, sub_specs=(m1.spec, m2.spec))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = Hybrid(m1.module, m2.module, n_classes)
    return ModelHandle(spec, module, seed)
