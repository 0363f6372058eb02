"""Synthetic H&E-like patches and colour domains for tests and smoke runs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DatasetSpec, ManifestRow, PatchRecord, save_image, write_manifest

# RGB appearance of eosin-stained tissue, hematoxylin-stained nuclei and glass, per lab
STAINS = {
    "lab_a": {"tissue": (0.93, 0.62, 0.78), "nuclei": (0.36, 0.22, 0.58), "glass": (0.96, 0.95, 0.97)},
    "lab_b": {"tissue": (0.86, 0.55, 0.62), "nuclei": (0.30, 0.16, 0.40), "glass": (0.94, 0.93, 0.92)},
}


def make_patch(rng: np.random.Generator, label: int, size: int = 32, stain: str = "lab_a") -> np.ndarray:
    """Tissue with a blank corner region and elliptical nuclei; positives carry more, larger nuclei."""
    colors = STAINS[stain]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = colors["tissue"]
    # glass region: half-plane through a random corner
    if rng.random() < 0.7:
        a = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.35, 0.6) * size
        glass = (np.cos(a) * (xx - size / 2) + np.sin(a) * (yy - size / 2)) > off
        img[glass] = colors["glass"]
    else:
        glass = np.zeros((size, size), dtype=bool)
    n = rng.integers(6, 11) if label == 1 else rng.integers(2, 5)
    rmax = 0.12 if label == 1 else 0.07
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.04, rmax, 2) * size
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[blob & ~glass] = colors["nuclei"]
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def toy_records(n: int, size: int = 32, stain: str = "lab_a", seed: int = 0, split: str = "train",
                dataset_id: str = "toy", positive_fraction: float = 0.5) -> list[PatchRecord]:
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) < round(positive_fraction * n)).astype(int)
    rng.shuffle(labels)
    return [PatchRecord(make_patch(rng, int(y), size, stain), int(y), dataset_id, split, f"{split}_{i:05d}")
            for i, y in enumerate(labels)]


def write_toy_dataset(root, n_train: int = 150, n_test: int = 50, n_valid: int = 0, size: int = 32,
                      stain: str = "lab_a", seed: int = 0, dataset_id: str = "toy") -> DatasetSpec:
    """MHIST-style layout (train/test, optional valid) with a manifest; returns its spec."""
    root = Path(root)
    rows = []
    for k, (split, n) in enumerate((("train", n_train), ("valid", n_valid), ("test", n_test))):
        for rec in toy_records(n, size, stain, seed * 101 + k, split, dataset_id):
            rel = f"{split}/{rec.source_key}.png"
            save_image(root / rel, rec.image)
            rows.append(ManifestRow(rel, rec.label, split, rec.source_key, None))
    write_manifest(root, rows)
    return DatasetSpec(dataset_id, ("negative", "positive"),
                       {"train": n_train, "valid": n_valid, "test": n_test}, "binary", str(root))


def tinted_noise(n: int, size: int, hue: str, seed: int = 0, bins: int = 64) -> np.ndarray:
    """Colour-domain toy set: smooth random saturation/value textures at one fixed hue.

    The hue sits at the centre of a histogram bin (red: bin 0, blue: bin 42 of 64)
    with a small jitter, so the domain's hue mode is unambiguous.
    """
    from skimage.color import hsv2rgb

    rng = np.random.default_rng(seed)
    centre = {"red": 0.5, "blue": 42.5}[hue] / bins
    cells = size // 4
    sat = np.repeat(np.repeat(rng.uniform(0.35, 0.9, (n, cells, cells)), 4, axis=1), 4, axis=2)
    val = np.repeat(np.repeat(rng.uniform(0.35, 0.95, (n, cells, cells)), 4, axis=1), 4, axis=2)
    h = np.mod(centre + rng.normal(0.0, 0.15 / bins, sat.shape), 1.0)
    img = hsv2rgb(np.stack([h, sat, val], axis=-1).reshape(-1, size, 3)).reshape(n, size, size, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
