"""Patch datasets: registration from manifests, splits, IDC re-patching, augmentation, sampling.

A dataset lives in one directory with a ``manifest.csv``::

    path,label,split,source_key,magnification
    img/0001.png,1,train,patientA:10:12,x40

Paths are relative to the dataset root. Records are ordered by ``source_key``.
"""
from __future__ import annotations

import csv
import dataclasses
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from .errors import ConfigError, DataIntegrityError, SamplingError, SplitUnavailableError

SPLITS = ("train", "valid", "test")
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("path", "label", "split", "source_key", "magnification")
DATA_ROOT_ENV = "HISTOEVAL_DATA_ROOT"

BREAKHIS_CLASSES = (
    "adenosis", "fibroadenoma", "phyllodes_tumor", "tubular_adenoma",
    "ductal_carcinoma", "lobular_carcinoma", "mucinous_carcinoma", "papillary_carcinoma",
)


@dataclass
class PatchRecord:
    image: np.ndarray
    label: int
    dataset_id: str
    split: str
    source_key: str
    magnification: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
            raise DataIntegrityError(f"{self.source_key}: expected HxWx3 image, got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise DataIntegrityError(f"{self.source_key}: pixel values outside [0, 1]")
        if self.split not in SPLITS:
            raise DataIntegrityError(f"{self.source_key}: unknown split {self.split!r}")


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    class_names: tuple[str, ...]
    split_sizes: dict[str, int] | None = None
    task: str = "binary"
    root: str | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def splits(self) -> tuple[str, ...]:
        if self.split_sizes is None:
            return SPLITS
        return tuple(s for s in SPLITS if self.split_sizes.get(s))

    def with_root(self, root) -> "DatasetSpec":
        return dataclasses.replace(self, root=str(root))


# Published split sizes; MHIST ships without a validation split.
CATALOG: dict[str, DatasetSpec] = {
    "pcam": DatasetSpec("pcam", ("normal", "metastasis"), {"train": 262_144, "valid": 32_768, "test": 32_768}),
    "breakhis": DatasetSpec("breakhis", BREAKHIS_CLASSES, {"train": 1_005, "valid": 504, "test": 504},
                            task="multiclass"),
    "idc": DatasetSpec("idc", ("non_idc", "idc"), {"train": 26_734, "valid": 10_009, "test": 16_410}),
    "gashissdb": DatasetSpec("gashissdb", ("normal", "abnormal"), {"train": 13_313, "valid": 6_657, "test": 13_314}),
    "mhist": DatasetSpec("mhist", ("hp", "ssa"), {"train": 2_175, "valid": 0, "test": 977}),
}


def catalog_spec(dataset_id: str, root=None) -> DatasetSpec:
    try:
        spec = CATALOG[dataset_id.lower()]
    except KeyError:
        raise ConfigError(f"unknown dataset {dataset_id!r}; known: {sorted(CATALOG)}") from None
    return spec.with_root(root) if root is not None else spec


def resolve_root(root) -> Path:
    """Absolute dataset root; relative paths are resolved against ``$HISTOEVAL_DATA_ROOT`` if set."""
    if root is None:
        env = os.environ.get(DATA_ROOT_ENV)
        if not env:
            raise ConfigError(f"no dataset root given and ${DATA_ROOT_ENV} unset")
        return Path(env)
    root = Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if not root.is_absolute() and not root.exists() and env:
        root = Path(env) / root
    return root


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path, image: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    split: str
    source_key: str
    magnification: str | None


class DatasetHandle:
    """Immutable view over a registered dataset; pixels are read on access."""

    def __init__(self, spec: DatasetSpec, root: Path, rows: Sequence[ManifestRow]):
        self.spec = spec
        self.root = root
        self.rows = tuple(sorted(rows, key=lambda r: r.source_key))

    def __len__(self):
        return len(self.rows)

    def __iter__(self) -> Iterator[PatchRecord]:
        for row in self.rows:
            yield self._record(row)

    def _record(self, row: ManifestRow) -> PatchRecord:
        return PatchRecord(load_image(self.root / row.path), row.label, self.spec.dataset_id, row.split,
                           row.source_key, row.magnification)

    def split_sizes(self) -> dict[str, int]:
        counts = Counter(r.split for r in self.rows)
        return {s: counts.get(s, 0) for s in SPLITS}

    def has_split(self, split: str) -> bool:
        if self.spec.split_sizes is not None:
            return bool(self.spec.split_sizes.get(split))
        return any(r.split == split for r in self.rows)


class SplitView(Sequence[PatchRecord]):
    """Lazy, stably ordered sequence of the records of one split."""

    def __init__(self, handle: DatasetHandle, rows: Sequence[ManifestRow]):
        self.handle = handle
        self.rows = tuple(rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SplitView(self.handle, self.rows[i])
        return self.handle._record(self.rows[i])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)


def register_dataset(spec: DatasetSpec) -> DatasetHandle:
    root = resolve_root(spec.root)
    if not root.is_dir():
        raise ConfigError(f"dataset {spec.dataset_id!r}: root {root} does not exist")
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise ConfigError(f"dataset {spec.dataset_id!r}: missing {manifest}")
    rows = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS[:4]) - set(reader.fieldnames or ())
        if missing:
            raise DataIntegrityError(f"{manifest}: missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                label = int(rec["label"])
            except ValueError:
                raise DataIntegrityError(f"{manifest}:{lineno}: non-integer label {rec['label']!r}") from None
            if not 0 <= label < spec.n_classes:
                raise DataIntegrityError(
                    f"{manifest}:{lineno}: label {label} outside [0, {spec.n_classes}) for {spec.dataset_id}")
            if rec["split"] not in SPLITS:
                raise DataIntegrityError(f"{manifest}:{lineno}: unknown split {rec['split']!r}")
            rows.append(ManifestRow(rec["path"], label, rec["split"], rec["source_key"],
                                    rec.get("magnification") or None))
    handle = DatasetHandle(spec, root, rows)
    if spec.split_sizes is not None and rows:
        found = handle.split_sizes()
        expected = {s: spec.split_sizes.get(s, 0) for s in SPLITS}
        if found != expected:
            raise DataIntegrityError(f"{spec.dataset_id}: split sizes {found} differ from expected {expected}")
    return handle


def load_split(handle: DatasetHandle, split: str) -> SplitView:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if not handle.has_split(split):
        raise SplitUnavailableError(f"dataset {handle.spec.dataset_id!r} has no {split} split")
    return SplitView(handle, [r for r in handle.rows if r.split == split])


def write_manifest(root, rows: Sequence[ManifestRow]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.path, r.label, r.split, r.source_key, r.magnification or ""])
    return path


# --- IDC re-patching -------------------------------------------------------

ImageProvider = Callable[[str, int, int], "np.ndarray | None"]


def grid_key(wsi_id: str, row: int, col: int) -> str:
    return f"{wsi_id}:{row}:{col}"


def parse_grid_key(key: str) -> tuple[str, int, int]:
    wsi, row, col = key.rsplit(":", 2)
    return wsi, int(row), int(col)


def majority_positive_tie(labels: Sequence[int]) -> int:
    """Majority vote over binary labels; a tie counts as positive."""
    pos = sum(1 for y in labels if y == 1)
    return int(pos >= len(labels) - pos)


def repatch_idc(patches_50: Sequence[PatchRecord], wsi_source: ImageProvider, cell: int = 50,
                label_rule: Callable[[Sequence[int]], int] = majority_positive_tie) -> list[PatchRecord]:
    """Join 2x2 groups of grid cells into non-overlapping patches of twice the side.

    Cell ``(r, c)`` belongs to output block ``(r // 2, c // 2)``. Cells missing from
    ``patches_50`` are read from ``wsi_source(wsi_id, r, c)``. The joined label is
    ``label_rule`` over the labels of the cells that were present.
    """
    blocks: dict[tuple[str, int, int], dict[tuple[int, int], PatchRecord]] = defaultdict(dict)
    for rec in patches_50:
        wsi, r, c = parse_grid_key(rec.source_key)
        if rec.image.shape[:2] != (cell, cell):
            raise DataIntegrityError(f"{rec.source_key}: expected {cell}x{cell} cell, got {rec.image.shape[:2]}")
        blocks[(wsi, r // 2, c // 2)][(r % 2, c % 2)] = rec
    out = []
    for (wsi, br, bc) in sorted(blocks):
        cells = blocks[(wsi, br, bc)]
        splits = {rec.split for rec in cells.values()}
        if len(splits) != 1:
            raise DataIntegrityError(f"block {wsi}:{br}:{bc} mixes splits {sorted(splits)}")
        image = np.empty((2 * cell, 2 * cell, 3), dtype=np.float32)
        origin = []
        for dr in (0, 1):
            for dc in (0, 1):
                r, c = 2 * br + dr, 2 * bc + dc
                if (dr, dc) in cells:
                    pix = cells[(dr, dc)].image
                    origin.append("patch")
                else:
                    pix = wsi_source(wsi, r, c)
                    if pix is None:
                        raise DataIntegrityError(f"wsi source cannot provide missing cell {grid_key(wsi, r, c)}")
                    pix = np.asarray(pix, dtype=np.float32)
                    if pix.shape != (cell, cell, 3):
                        raise DataIntegrityError(f"wsi source returned {pix.shape} for {grid_key(wsi, r, c)}")
                    origin.append("wsi")
                image[dr * cell:(dr + 1) * cell, dc * cell:(dc + 1) * cell] = pix
        first = next(iter(cells.values()))
        label = label_rule([rec.label for rec in cells.values()])
        out.append(PatchRecord(image, label, first.dataset_id, first.split, grid_key(wsi, br, bc),
                               first.magnification, meta={"quadrant_sources": tuple(origin)}))
    return out


# --- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    hue_shift_range: float = 1.0
    horizontal_flip: float = 0.5
    vertical_flip: float = 0.5
    rotation_max_degrees: float = 180.0

    def __post_init__(self):
        for name in ("horizontal_flip", "vertical_flip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} probability {p} outside [0, 1]")
        if not 0.0 <= self.hue_shift_range <= 1.0:
            raise ConfigError("hue_shift_range is a fraction of the hue circle in [0, 1]")


NO_AUGMENTATION = AugmentationPolicy(0.0, 0.0, 0.0, 0.0)


def hue_shift(image: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns of the hue circle (wraps modulo 1)."""
    if shift == 0:
        return image.copy()
    hsv = rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return np.clip(hsv2rgb(hsv), 0.0, 1.0).astype(np.float32)


def flip(image: np.ndarray, axis: int) -> np.ndarray:
    """axis=1 flips left-right, axis=0 flips up-down."""
    return np.flip(image, axis=axis).copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre keeping the original size; corners are reflect-padded."""
    if degrees == 0:
        return image.copy()
    out = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _as_rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def augment(record: PatchRecord, policy: AugmentationPolicy, rng_state) -> PatchRecord:
    rng = _as_rng(rng_state)
    # fixed number of draws per call keeps streams aligned across policies
    u_hue, u_h, u_v, u_rot = rng.random(4)
    img = record.image
    if img.shape[0] == 1 and img.shape[1] == 1:
        return dataclasses.replace(record, image=img.copy())
    img = img.astype(np.float32)
    if policy.hue_shift_range > 0:
        img = hue_shift(img, u_hue * policy.hue_shift_range)
    if u_h < policy.horizontal_flip:
        img = flip(img, 1)
    if u_v < policy.vertical_flip:
        img = flip(img, 0)
    if policy.rotation_max_degrees > 0:
        img = rotate(img, (2 * u_rot - 1) * policy.rotation_max_degrees)
    return dataclasses.replace(record, image=np.ascontiguousarray(img))


# --- weighted sampling -----------------------------------------------------

class WeightedSampler:
    """Draws record indices so that class frequencies follow target proportions.

    Each draw picks class ``c`` with probability ``p_c`` and then a record of
    that class uniformly, i.e. per-record weight ``p_c / n_c``.
    """

    def __init__(self, labels: np.ndarray, proportions: Sequence[float], rng_state=None):
        labels = np.asarray(labels, dtype=np.int64)
        p = np.asarray(proportions, dtype=np.float64)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
            raise SamplingError(f"proportions {p.tolist()} must be nonnegative and sum to 1")
        counts = np.bincount(labels, minlength=len(p)) if labels.size else np.zeros(len(p), dtype=np.int64)
        if labels.size and labels.max() >= len(p):
            raise SamplingError(f"label {labels.max()} has no target proportion")
        absent = [c for c in range(len(p)) if p[c] > 0 and counts[c] == 0]
        if absent:
            raise SamplingError(f"classes {absent} have positive target proportion but no records")
        self.labels = labels
        self.proportions = p
        with np.errstate(divide="ignore", invalid="ignore"):
            per_class = np.where(counts > 0, p / np.maximum(counts, 1), 0.0)
        self.weights = per_class[labels]
        self.weights = self.weights / self.weights.sum()
        self.rng = _as_rng(rng_state)

    def draw(self, k: int) -> np.ndarray:
        return self.rng.choice(len(self.labels), size=k, replace=True, p=self.weights)

    def __iter__(self):
        while True:
            yield int(self.draw(1)[0])


def labels_of(records) -> np.ndarray:
    if isinstance(records, SplitView):
        return records.labels
    if isinstance(records, np.ndarray):
        return records.astype(np.int64)
    return np.array([r.label if isinstance(r, PatchRecord) else int(r) for r in records], dtype=np.int64)


def weighted_sampler(records, target_class_proportions: Sequence[float], rng_state=None) -> WeightedSampler:
    return WeightedSampler(labels_of(records), target_class_proportions, rng_state)


class InMemoryDataset(Sequence[PatchRecord]):
    """Plain list of records, for derived datasets (re-stained, re-labelled, re-patched)."""

    def __init__(self, records: Sequence[PatchRecord]):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def stack_images(records: Sequence[PatchRecord]) -> np.ndarray:
    return np.stack([r.image for r in records]).astype(np.float32)
