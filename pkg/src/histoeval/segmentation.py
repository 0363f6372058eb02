"""Tripartite nuclei / tissue / background masks with a pluggable nuclei predictor."""
from __future__ import annotations

import importlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage
from skimage.color import rgb2hed
from skimage.morphology import disk

from .data import PatchRecord
from .errors import ConfigError, ShapeError

BACKGROUND, TISSUE, NUCLEI = 0, 1, 2
SEGMENTS = ("nuclei", "tissue", "background")
SEGMENT_LABELS = {"nuclei": NUCLEI, "tissue": TISSUE, "background": BACKGROUND}
PALETTE = {BACKGROUND: (255, 255, 255), TISSUE: (230, 120, 170), NUCLEI: (60, 40, 140)}

DEFAULT_THRESHOLD = 0.85
DEFAULT_OPENING_RADIUS = 2


def _image(patch) -> np.ndarray:
    img = patch.image if isinstance(patch, PatchRecord) else np.asarray(patch)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 patch, got {img.shape}")
    return img.astype(np.float64)


def segment_background(patch, threshold: float = DEFAULT_THRESHOLD,
                       opening_radius: int = DEFAULT_OPENING_RADIUS) -> np.ndarray:
    """Bright pixels (RGB mean >= threshold) cleaned by a disc-shaped opening.

    The image border does not erode the mask (pixels beyond it count as background),
    so an all-white patch stays all background.
    """
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if opening_radius < 0 or int(opening_radius) != opening_radius:
        raise ConfigError(f"opening_radius must be a nonnegative integer, got {opening_radius}")
    mask = _image(patch).mean(axis=-1) >= threshold
    if opening_radius == 0:
        return mask
    se = disk(int(opening_radius)).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=se, border_value=1)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0)


@runtime_checkable
class NucleiPredictor(Protocol):
    provenance: str

    def predict(self, patch) -> np.ndarray: ...


class HematoxylinPredictor:
    """Rule-based stand-in for a learned nuclei segmenter.

    Colour deconvolution (Ruifrok-Johnston H&E-DAB vectors) gives a hematoxylin
    optical density per pixel; nuclei are pixels whose hematoxylin density exceeds
    ``cutoff`` and dominates the eosin density.
    """

    provenance = "fallback"

    def __init__(self, cutoff: float = 0.05):
        self.cutoff = float(cutoff)

    def predict(self, patch) -> np.ndarray:
        hed = rgb2hed(np.clip(_image(patch), 0.0, 1.0))
        h, e = hed[..., 0], hed[..., 1]
        return (h > self.cutoff) & (h > e)


class TorchScriptPredictor:
    """Learned predictor from a TorchScript file producing (B, 1, H, W) logits."""

    def __init__(self, path, threshold: float = 0.5, provenance: str | None = None):
        import torch

        self._torch = torch
        self.module = torch.jit.load(str(path), map_location="cpu").eval()
        self.threshold = threshold
        self.provenance = provenance or f"torchscript:{Path(path).name}"

    def predict(self, patch) -> np.ndarray:
        torch = self._torch
        img = _image(patch)
        x = torch.from_numpy(img.transpose(2, 0, 1)[None].astype(np.float32))
        with torch.no_grad():
            prob = torch.sigmoid(self.module(x))[0, 0].numpy()
        return prob > self.threshold


def load_predictor(key: str | None = None, **kwargs) -> NucleiPredictor:
    """Resolve the ``nuclei_predictor`` config key.

    ``fallback`` (default) -> hematoxylin heuristic; ``torchscript:PATH`` -> learned
    model; ``package.module:factory`` -> any importable factory returning a predictor.
    """
    if key in (None, "", "fallback", "hematoxylin"):
        return HematoxylinPredictor(**kwargs)
    if key.startswith("torchscript:"):
        return TorchScriptPredictor(key.split(":", 1)[1], **kwargs)
    if ":" in key:
        mod, attr = key.split(":", 1)
        try:
            factory = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load nuclei predictor {key!r}: {exc}") from exc
        pred = factory(**kwargs)
        if not isinstance(pred, NucleiPredictor):
            raise ConfigError(f"{key!r} did not return a NucleiPredictor")
        return pred
    raise ConfigError(f"unknown nuclei predictor {key!r}")


@dataclass
class TripartiteMask:
    labels: np.ndarray  # H x W uint8 in {BACKGROUND, TISSUE, NUCLEI}
    provenance: str = ""

    def mask(self, segment: str) -> np.ndarray:
        return self.labels == SEGMENT_LABELS[segment]

    @property
    def fractions(self) -> dict[str, float]:
        n = self.labels.size
        return {s: float(np.count_nonzero(self.mask(s))) / n for s in SEGMENTS}

    def one_hot(self) -> np.ndarray:
        return np.stack([self.mask(s) for s in SEGMENTS], axis=-1)


def tripartite(patch, nuclei: NucleiPredictor, threshold: float = DEFAULT_THRESHOLD,
               opening_radius: int = DEFAULT_OPENING_RADIUS) -> TripartiteMask:
    """Nuclei where the predictor fires, else background where the bright-pixel mask fires, else tissue."""
    img = _image(patch)
    nuc = np.asarray(nuclei.predict(img), dtype=bool)
    if nuc.shape != img.shape[:2]:
        raise ShapeError(f"nuclei predictor returned {nuc.shape}, expected {img.shape[:2]}")
    bg = segment_background(img, threshold, opening_radius)
    labels = np.full(img.shape[:2], TISSUE, dtype=np.uint8)
    labels[bg] = BACKGROUND
    labels[nuc] = NUCLEI
    return TripartiteMask(labels, getattr(nuclei, "provenance", ""))


def save_mask_png(path, mask: TripartiteMask | np.ndarray) -> Path:
    from PIL import Image

    labels = mask.labels if isinstance(mask, TripartiteMask) else np.asarray(mask, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    flat = []
    for i in range(3):
        flat.extend(PALETTE[i])
    img.putpalette(flat + [0] * (768 - len(flat)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
