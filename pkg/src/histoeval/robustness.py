"""Three-way stain robustness protocol: in-stain, cross-stain cross-distribution,
and cross-stain in-distribution (restained in-domain test set)."""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BREAKHIS_CLASSES, InMemoryDataset, PatchRecord, labels_of, weighted_sampler
from .errors import ConfigError, DataIntegrityError, DegenerateBaselineError, ProtocolError
from .stain import restain_records
from .training import predict_scores
from .stats import auc

BENIGN = frozenset(range(4))
IDC_SUBCLASS = BREAKHIS_CLASSES.index("ductal_carcinoma")
REPORT_COLUMNS = ("model", "seed", "train_domain", "in_stain_in_dist", "cross_stain_cross_dist",
                  "cross_stain_in_dist", "drop_cross_dist_pct", "drop_in_dist_pct")


def binarize_breakhis(records: Sequence[PatchRecord]) -> tuple[InMemoryDataset, int]:
    """IDC subclass -> 1, benign subclasses -> 0; other malignant subclasses are dropped.

    Returns the binary records and the number dropped.
    """
    out, dropped = [], 0
    for r in records:
        if not 0 <= r.label < len(BREAKHIS_CLASSES):
            raise DataIntegrityError(f"{r.source_key}: unknown BreaKHis subclass {r.label}")
        if r.label == IDC_SUBCLASS:
            out.append(dataclasses.replace(r, label=1))
        elif r.label in BENIGN:
            out.append(dataclasses.replace(r, label=0))
        else:
            dropped += 1
    return InMemoryDataset(out), dropped


def relative_drop(auc_test: float, auc_in: float) -> float:
    """Percent change (AUC_test - AUC_in) / AUC_in * 100."""
    if auc_in == 0:
        raise DegenerateBaselineError("in-distribution AUC is zero; drop undefined")
    return (auc_test - auc_in) / auc_in * 100.0


@dataclass
class RobustnessReport:
    model: str
    seed: int
    train_domain: str
    in_stain_in_dist: float
    cross_stain_cross_dist: float
    cross_stain_in_dist: float

    @property
    def drop_cross_dist(self) -> float:
        return relative_drop(self.cross_stain_cross_dist, self.in_stain_in_dist)

    @property
    def drop_in_dist(self) -> float:
        return relative_drop(self.cross_stain_in_dist, self.in_stain_in_dist)

    def row(self) -> list:
        return [self.model, self.seed, self.train_domain, f"{self.in_stain_in_dist:.6f}",
                f"{self.cross_stain_cross_dist:.6f}", f"{self.cross_stain_in_dist:.6f}",
                f"{self.drop_cross_dist:.4f}", f"{self.drop_in_dist:.4f}"]


def class_proportions(records, n_classes: int = 2) -> np.ndarray:
    counts = np.bincount(labels_of(records), minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def match_proportions(records: Sequence[PatchRecord], target: np.ndarray, seed: int) -> Sequence[PatchRecord]:
    """Resample ``records`` (same size, with replacement) to the target class proportions.

    Records whose proportions already equal the target are returned unchanged, so
    AUC is only perturbed when re-weighting is actually needed.
    """
    current = class_proportions(records, len(target))
    if np.allclose(current, target, rtol=0, atol=1e-12):
        return records
    sampler = weighted_sampler(records, target, rng_state=seed)
    return [records[int(i)] for i in sampler.draw(len(records))]


def _auc(model, records) -> float:
    return auc(predict_scores(model, records))


def run_protocol(models, ds_a_test: Sequence[PatchRecord], ds_b_test: Sequence[PatchRecord], stain_model,
                 train_domain: str = "a", other_domain: str = "b", seed: int = 0,
                 fake_b: Sequence[PatchRecord] | None = None) -> list[RobustnessReport]:
    """AUC of every model on dsA test, proportion-matched dsB test, and dsA test restained A->B.

    ``fake_b`` may be passed to reuse a cached restained set; otherwise it is
    generated once and shared by all models.
    """
    if stain_model is None or not hasattr(stain_model, "generator"):
        raise ProtocolError("stain model must provide generators")
    try:
        stain_model.generator("a2b")
    except ConfigError as exc:
        raise ProtocolError(f"stain model lacks the a2b generator: {exc}") from exc
    if fake_b is None:
        fake_b = restain_records(stain_model, "a2b", list(ds_a_test), other_domain)
    cross = match_proportions(ds_b_test, class_proportions(ds_a_test), seed)
    reports = []
    for m in models:
        reports.append(RobustnessReport(
            model=m.spec.name, seed=m.seed, train_domain=train_domain,
            in_stain_in_dist=_auc(m, ds_a_test),
            cross_stain_cross_dist=_auc(m, cross),
            cross_stain_in_dist=_auc(m, fake_b)))
    return reports


def reports_to_csv(reports: Sequence[RobustnessReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
