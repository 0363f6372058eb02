"""Overlap of relevance / attention maps with tripartite segment masks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sst

from . import attribution as attr
from .data import PatchRecord
from .errors import CapabilityError, DegenerateCorrelationError, EmptyInputError, ZeroRelevanceError
from .segmentation import (DEFAULT_OPENING_RADIUS, DEFAULT_THRESHOLD, SEGMENTS, NucleiPredictor,
                           TripartiteMask, tripartite)

REPORT_COLUMNS = ("model", "segment", "mass_acc", "pearson_r", "pearson_p", "n", "excluded")
TARGET_POLICIES = ("positive", "all")


def _values(m) -> np.ndarray:
    return np.asarray(m.values if hasattr(m, "values") else m, dtype=np.float64)


def mass_accuracy(pooled, mask: np.ndarray) -> float:
    v = _values(pooled)
    total = v.sum()
    if not total > 0:
        raise ZeroRelevanceError("pooled map carries no relevance")
    return float(v[np.asarray(mask, dtype=bool)].sum() / total)


def point_biserial(pooled, mask: np.ndarray) -> tuple[float, float]:
    """Pearson r between map values and the 0/1 mask, with its two-sided t-test p-value."""
    v = _values(pooled).ravel()
    m = np.asarray(mask, dtype=np.float64).ravel()
    if np.ptp(v) == 0 or np.ptp(m) == 0:
        raise DegenerateCorrelationError("constant map or constant mask")
    res = sst.pearsonr(v, m)
    return float(res.statistic), float(res.pvalue)


@dataclass
class SegmentRow:
    segment: str
    mass_acc: float
    pearson_r: float
    pearson_p: float
    n: int
    excluded: int


@dataclass
class OverlapReport:
    model: str
    map_kind: str
    rows: list[SegmentRow]
    n_patches: int
    excluded_zero_relevance: int = 0
    baseline: dict[str, float] | None = None
    per_patch: list[dict[str, float]] = field(default_factory=list, repr=False)

    def row(self, segment: str) -> SegmentRow:
        return next(r for r in self.rows if r.segment == segment)

    def csv_rows(self) -> list[list]:
        label = f"{self.model}/{self.map_kind}" if self.map_kind != "lrp_pooled" else self.model
        out = [[label, r.segment, r.mass_acc, r.pearson_r, r.pearson_p, r.n, r.excluded] for r in self.rows]
        if self.baseline is not None:
            out += [["random", s, self.baseline[s], "", "", self.n_patches, 0] for s in SEGMENTS]
        return out


class _Accumulator:
    def __init__(self):
        self.mass = {s: [] for s in SEGMENTS}
        self.r = {s: [] for s in SEGMENTS}
        self.p = {s: [] for s in SEGMENTS}
        self.degenerate = {s: 0 for s in SEGMENTS}
        self.zero = 0
        self.n = 0
        self.per_patch = []

    def add(self, pooled: np.ndarray, masks: TripartiteMask):
        self.n += 1
        try:
            masses = {s: mass_accuracy(pooled, masks.mask(s)) for s in SEGMENTS}
        except ZeroRelevanceError:
            self.zero += 1
            return
        self.per_patch.append(masses)
        for s in SEGMENTS:
            self.mass[s].append(masses[s])
            try:
                r, p = point_biserial(pooled, masks.mask(s))
            except DegenerateCorrelationError:
                self.degenerate[s] += 1
                continue
            self.r[s].append(r)
            self.p[s].append(p)

    def report(self, model: str, kind: str) -> OverlapReport:
        rows = []
        for s in SEGMENTS:
            mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
            rows.append(SegmentRow(s, mean(self.mass[s]), mean(self.r[s]), mean(self.p[s]),
                                   len(self.r[s]), self.zero + self.degenerate[s]))
        return OverlapReport(model, kind, rows, self.n, self.zero, per_patch=self.per_patch)


def _select(records: Sequence[PatchRecord], target_policy: str) -> list[PatchRecord]:
    if target_policy not in TARGET_POLICIES:
        raise ValueError(f"target_policy must be one of {TARGET_POLICIES}")
    chosen = [r for r in records if target_policy == "all" or r.label == 1]
    if not chosen:
        raise EmptyInputError(f"no patches selected under policy {target_policy!r}")
    return chosen


def _model_name(model) -> str:
    spec = getattr(model, "spec", None)
    return spec.name if spec is not None else type(model).__name__


def aggregate(model, records: Sequence[PatchRecord], predictor: NucleiPredictor,
              target_policy: str = "positive", threshold: float = DEFAULT_THRESHOLD,
              opening_radius: int = DEFAULT_OPENING_RADIUS, batch_size: int = 16,
              with_baseline: bool = True) -> OverlapReport:
    """LRP from the true label of each selected patch, pooled, scored against its tripartite mask."""
    chosen = _select(records, target_policy)
    acc = _Accumulator()
    masks = [tripartite(r, predictor, threshold, opening_radius) for r in chosen]
    for start in range(0, len(chosen), batch_size):
        part = chosen[start:start + batch_size]
        batch = np.stack([r.image for r in part])
        rel = attr.lrp_batch(model, batch, [r.label for r in part])
        for j, r in enumerate(part):
            acc.add(attr.pool_relevance(rel[j]).values, masks[start + j])
    report = acc.report(_model_name(model), "lrp_pooled")
    if with_baseline:
        report.baseline = _baseline_from_masks(masks)
    return report


def _baseline_from_masks(masks: Sequence[TripartiteMask]) -> dict[str, float]:
    if not masks:
        raise EmptyInputError("random baseline of an empty split")
    return {s: float(np.mean([m.fractions[s] for m in masks])) for s in SEGMENTS}


def random_baseline(records: Sequence[PatchRecord], predictor: NucleiPredictor,
                    threshold: float = DEFAULT_THRESHOLD,
                    opening_radius: int = DEFAULT_OPENING_RADIUS) -> dict[str, float]:
    """Mean per-segment area fraction; the expected mass accuracy of i.i.d. random maps."""
    return _baseline_from_masks([tripartite(r, predictor, threshold, opening_radius) for r in records])


def attention_overlap(model, records: Sequence[PatchRecord], predictor: NucleiPredictor,
                      target_policy: str = "positive", threshold: float = DEFAULT_THRESHOLD,
                      opening_radius: int = DEFAULT_OPENING_RADIUS) -> list[OverlapReport]:
    """One report per head of the topmost layer, using upscaled CLS attention as the map."""
    if not getattr(model, "has_attention", False) or getattr(model.spec, "name", "") == "botnet50":
        raise CapabilityError(f"{_model_name(model)} has no CLS-token attention")
    chosen = _select(records, target_policy)
    accs = None
    masks = []
    for r in chosen:
        maps = attr.attention_per_head(model, r)
        m = tripartite(r, predictor, threshold, opening_radius)
        masks.append(m)
        if accs is None:
            accs = [_Accumulator() for _ in range(maps.heads)]
        for h in range(maps.heads):
            accs[h].add(attr.upscale(maps.maps[h], r.image.shape[:2]), m)
    baseline = _baseline_from_masks(masks)
    reports = []
    for h, a in enumerate(accs):
        rep = a.report(_model_name(model), f"attention_head_{h + 1}")
        rep.baseline = baseline if h == len(accs) - 1 else None
        reports.append(rep)
    return reports


def reports_to_csv(reports: Sequence[OverlapReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for row in rep.csv_rows():
            w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6g}"
    return v
