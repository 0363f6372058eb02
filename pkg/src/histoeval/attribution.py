"""Relevance maps (LRP) and attention maps for zoo models."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import PatchRecord
from .errors import CapabilityError, RuleCoverageError, ShapeError
from .models import layers as L
from .models.base import Classifier
from .models.hybrid import Hybrid
from .models.zoo import ModelHandle, to_batch

GRID_MAGIC = b"HEVR"


@dataclass
class RelevanceMap:
    values: np.ndarray  # H x W x 3, signed
    target_class: int
    model_id: str = ""
    source_key: str = ""
    branches: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PooledRelevanceMap:
    values: np.ndarray  # H x W, nonnegative


@dataclass
class AttentionMaps:
    maps: np.ndarray  # heads x G x G
    layer: int
    heads: int


def _unwrap(model) -> tuple[Classifier, int, str]:
    if isinstance(model, ModelHandle):
        return model.module, model.input_size, model.spec.name
    if isinstance(model, Classifier):
        return model, model.input_size, type(model).__name__
    if not hasattr(model, "relprop"):
        raise RuleCoverageError(f"no relevance rule set registered for {type(model).__name__}")
    return model, None, type(model).__name__


def _patch_batch(patch, input_size, module=None):
    if isinstance(patch, PatchRecord):
        patch = patch.image
    if isinstance(patch, np.ndarray) and patch.ndim == 3:
        patch = patch[None]
    x = to_batch(patch, input_size)
    p = next(module.parameters(), None) if module is not None else None
    if p is None or p.dtype == x.dtype:
        return x
    # float64 modules (exactness checks) get the input at full precision
    if isinstance(patch, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(patch.transpose(0, 3, 1, 2))).to(p.dtype)
    return patch.to(p.dtype) if isinstance(patch, torch.Tensor) else x.to(p.dtype)


def _start_relevance(logits: torch.Tensor, targets) -> torch.Tensor:
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if targets.numel() == 1 and logits.shape[0] > 1:
        targets = targets.expand(logits.shape[0])
    R = torch.zeros_like(logits)
    idx = torch.arange(logits.shape[0])
    R[idx, targets] = logits[idx, targets]
    return R


def lrp_batch(model, batch, targets, eps: float = L.DEFAULT_EPS) -> np.ndarray:
    """Input relevance (B, H, W, 3) for the given target classes, starting from the target logits."""
    module, size, _ = _unwrap(model)
    x = _patch_batch(batch, size, module)
    module.eval()
    with torch.no_grad():
        logits = module(x)
        R = module.relprop(_start_relevance(logits, targets), eps)
    return R.permute(0, 2, 3, 1).cpu().numpy()


def lrp(model, patch, target_class: int, eps: float = L.DEFAULT_EPS) -> RelevanceMap:
    module, _, name = _unwrap(model)
    if isinstance(module, Hybrid):
        return lrp_hybrid(model, patch, target_class, eps)
    values = lrp_batch(model, patch, [target_class], eps)[0]
    key = patch.source_key if isinstance(patch, PatchRecord) else ""
    return RelevanceMap(values, target_class, name, key)


def lrp_hybrid(model, patch, target_class: int, eps: float = L.DEFAULT_EPS) -> RelevanceMap:
    """Hybrid relevance: the classifier splits relevance over the concatenated features,
    each branch propagates its share, and the input map is the sum of both branch maps."""
    module, size, name = _unwrap(model)
    if not isinstance(module, Hybrid):
        raise CapabilityError(f"{name} is not a hybrid model")
    x = _patch_batch(patch, size, module)
    module.eval()
    with torch.no_grad():
        logits = module(x)
        r1, r2 = module.relprop_branches(_start_relevance(logits, [target_class]), eps)
    b1 = r1[0].permute(1, 2, 0).cpu().numpy()
    b2 = r2[0].permute(1, 2, 0).cpu().numpy()
    key = patch.source_key if isinstance(patch, PatchRecord) else ""
    return RelevanceMap(b1 + b2, target_class, name, key, branches=(b1, b2))


def pool_relevance(rmap) -> PooledRelevanceMap:
    """Channel mean first, then negative values set to zero."""
    values = rmap.values if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    return PooledRelevanceMap(np.maximum(values.mean(axis=-1), 0.0))


def attention_per_head(model, patch) -> AttentionMaps:
    """CLS-token attention of the topmost layer, one G x G map per head, each summing to one."""
    module, size, name = _unwrap(model)
    if not hasattr(module, "blocks") or not hasattr(module, "grid"):
        raise CapabilityError(f"{name} has no CLS-token attention")
    x = _patch_batch(patch, size)
    module.eval()
    with torch.no_grad():
        module(x)
    attn = module.attention_maps()[0]  # heads x N x N
    cls_row = attn[:, 0, 1:]
    g = module.grid
    maps = cls_row / cls_row.sum(dim=-1, keepdim=True)
    return AttentionMaps(maps.reshape(-1, g, g).cpu().numpy(), layer=len(module.blocks) - 1,
                         heads=attn.shape[0])


def token_relevance(model, patch, target_class: int) -> np.ndarray:
    """Token-grid explanation for ViTs: relevance of each attention map weighted by its
    gradient, positive part averaged over heads, accumulated over layers."""
    module, size, name = _unwrap(model)
    if not hasattr(module, "blocks") or not hasattr(module, "grid"):
        raise CapabilityError(f"{name} has no token attention")
    x = _patch_batch(patch, size)
    module.eval()
    module.zero_grad(set_to_none=True)
    with torch.enable_grad():
        logits = module(x)
        one_hot = torch.zeros_like(logits)
        one_hot[0, target_class] = 1.0
        (logits * one_hot).sum().backward()
    with torch.no_grad():
        module.relprop(one_hot, L.DEFAULT_EPS)
        n = module.blocks[0].attn.attn_probs.shape[-1]
        rollout = torch.eye(n)
        for blk in module.blocks:
            cam = (blk.attn.attn_grad[0] * blk.attn.attn_relevance[0]).clamp(min=0).mean(dim=0)
            rollout = rollout + cam @ rollout
    module.zero_grad(set_to_none=True)
    g = module.grid
    return rollout[0, 1:].reshape(g, g).cpu().numpy()


def upscale(grid_map: np.ndarray, size: tuple[int, int] | int, renormalize: bool = False) -> np.ndarray:
    """Bilinear interpolation of a G x G map onto H x W (half-pixel centres).

    With ``renormalize`` the output is rescaled to keep the input's mean value.
    """
    if isinstance(size, int):
        size = (size, size)
    g = np.asarray(grid_map, dtype=np.float64)
    if size[0] < g.shape[0] or size[1] < g.shape[1]:
        raise ShapeError(f"cannot upscale {g.shape} to smaller {size}")
    t = torch.from_numpy(g)[None, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    if renormalize and out.mean() != 0:
        out = out * (g.mean() / out.mean())
    return out


# --- export ----------------------------------------------------------------

def write_grid(path, values: np.ndarray) -> Path:
    """Dense float32 grid with a 16-byte header: magic, H, W, channels (little-endian uint32)."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 2:
        values = values[..., None]
    h, w, c = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(values).tobytes())
    return path


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {header[:4]!r}")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(h, w, c)


def save_heatmap_png(path, values: np.ndarray, signed: bool | None = None) -> Path:
    """Signed maps use a diverging colormap centred at zero; nonnegative maps a sequential one."""
    from matplotlib import colormaps
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v.sum(axis=-1)
    if signed is None:
        signed = bool(v.min() < 0)
    if signed:
        m = np.abs(v).max() or 1.0
        rgba = colormaps["bwr"]((v / m + 1) / 2)
    else:
        m = v.max() or 1.0
        rgba = colormaps["viridis"](v / m)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)
    return path
