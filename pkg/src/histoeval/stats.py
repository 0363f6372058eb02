"""Accuracy, AUC, bootstrap confidence intervals and the k x k model-set comparison."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from .errors import BootstrapError, DegenerateLabelsError, EmptyInputError, ProtocolError

M1_BETTER = "M1_better"
M2_BETTER = "M2_better"
OVERLAPS_ZERO = "CI_overlaps_zero"


@dataclass(frozen=True)
class ScoreSample:
    """Per-example class scores and true labels.

    ``scores`` is (n,) for a binary positive-class score or (n, C) per-class
    scores; ``are_logits`` marks unnormalized scores.
    """

    scores: np.ndarray
    labels: np.ndarray
    are_logits: bool = False

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if scores.shape[0] != labels.shape[0]:
            raise ValueError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "ScoreSample":
        return ScoreSample(self.scores[idx], self.labels[idx], self.are_logits)

    def class_scores(self) -> np.ndarray:
        """(n, C) matrix of per-class scores, softmax-normalized when given logits."""
        s = self.scores
        if s.ndim == 1:
            return np.stack([1.0 - s, s], axis=1) if not self.are_logits else np.stack([-s, s], axis=1)
        return softmax(s, axis=1) if self.are_logits else s

    def predictions(self) -> np.ndarray:
        # np.argmax picks the lowest index among ties
        return np.argmax(self.class_scores(), axis=1)


def accuracy(sample: ScoreSample) -> float:
    if len(sample) == 0:
        raise EmptyInputError("accuracy of an empty sample")
    return float(np.mean(sample.predictions() == sample.labels))


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == 1
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(sample: ScoreSample) -> float:
    """Binary AUC, or the unweighted mean of one-vs-rest AUCs over the classes present."""
    if len(sample) == 0:
        raise EmptyInputError("AUC of an empty sample")
    labels = sample.labels
    present = np.unique(labels)
    if len(present) < 2:
        raise DegenerateLabelsError(f"AUC needs >= 2 classes present, got {present.tolist()}")
    s = sample.scores
    if s.ndim == 1:
        return binary_auc(s, labels)
    if s.shape[1] == 2:
        # the positive-class margin is monotone in the positive-class probability
        margin = s[:, 1] - s[:, 0] if sample.are_logits else s[:, 1]
        return binary_auc(margin, labels)
    probs = sample.class_scores()
    return float(np.mean([binary_auc(probs[:, c], (labels == c).astype(int)) for c in present]))


_RECOVERABLE = (DegenerateLabelsError, EmptyInputError)


def _resample_indices(n: int, iterations: int, rng: np.random.Generator,
                      valid: Callable[[np.ndarray], bool]) -> list[np.ndarray]:
    out = []
    redraws = 0
    while len(out) < iterations:
        idx = rng.integers(0, n, size=n)
        if valid(idx):
            out.append(idx)
            continue
        redraws += 1
        if redraws > 10 * iterations:
            raise BootstrapError(f"metric undefined on {redraws} resamples (cap {10 * iterations})")
    return out


def _metric_ok(metric, samples: Sequence[ScoreSample]):
    def ok(idx):
        try:
            for s in samples:
                metric(s.subset(idx))
        except _RECOVERABLE:
            return False
        return True
    return ok


def percentile_ci(values: np.ndarray, alpha: float) -> tuple[float, float]:
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def bootstrap_ci(metric: Callable[[ScoreSample], float], sample: ScoreSample, iterations: int = 100,
                 alpha: float = 0.05, rng_state=None) -> tuple[float, float]:
    """Percentile bootstrap interval; resamples on which the metric is undefined are redrawn."""
    if len(sample) == 0:
        raise EmptyInputError("bootstrap of an empty sample")
    rng = np.random.default_rng(rng_state)
    values = []

    def valid(idx):
        try:
            values.append(metric(sample.subset(idx)))
        except _RECOVERABLE:
            return False
        return True

    _resample_indices(len(sample), iterations, rng, valid)
    return percentile_ci(np.asarray(values), alpha)


def threshold(k: int) -> Fraction:
    """Minimum qualifying fraction k(k+1) / (2k^2) for the comparison rule."""
    return Fraction(k * (k + 1), 2 * k * k)


@dataclass
class ComparisonVerdict:
    outcomes: list[list[str]]
    counted: list[list[bool]]
    point_diffs: np.ndarray
    ci: np.ndarray
    fraction: float
    threshold: Fraction
    not_significantly_worse: bool
    metric: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.outcomes)

    def to_json(self) -> str:
        return json.dumps({
            "metric": self.metric,
            "k": self.k,
            "outcomes": self.outcomes,
            "counted": self.counted,
            "point_diffs": np.round(self.point_diffs, 10).tolist(),
            "ci_low": np.round(self.ci[..., 0], 10).tolist(),
            "ci_high": np.round(self.ci[..., 1], 10).tolist(),
            "fraction": self.fraction,
            "threshold": float(self.threshold),
            "not_significantly_worse": self.not_significantly_worse,
        }, indent=2)


def verdict_from_outcomes(outcomes, point_diffs, ci, metric="") -> ComparisonVerdict:
    k = len(outcomes)
    counted = [[bool(outcomes[i][j] == OVERLAPS_ZERO or point_diffs[i][j] > 0) for j in range(k)] for i in range(k)]
    n = sum(map(sum, counted))
    return ComparisonVerdict(
        outcomes=outcomes, counted=counted, point_diffs=np.asarray(point_diffs, dtype=float),
        ci=np.asarray(ci, dtype=float), fraction=n / (k * k), threshold=threshold(k),
        not_significantly_worse=bool(2 * n >= k * (k + 1)), metric=metric)


def compare_model_sets(m1: Sequence[ScoreSample], m2: Sequence[ScoreSample],
                       metric: Callable[[ScoreSample], float] = auc, iterations: int = 100,
                       alpha: float = 0.05, rng_state=None) -> ComparisonVerdict:
    """Is model set ``m1`` not significantly worse than ``m2``?

    Every (i, j) pairing is judged on a paired bootstrap of ``metric(m1[i]) - metric(m2[j])``.
    One set of resample indices is shared by all pairings, so the comparison of a
    set with itself is exactly antisymmetric.
    """
    if len(m1) == 0 or len(m1) != len(m2):
        raise ProtocolError(f"need equally sized nonempty model sets, got {len(m1)} and {len(m2)}")
    ref = m1[0].labels
    for s in list(m1) + list(m2):
        if s.labels.shape != ref.shape or not np.array_equal(s.labels, ref):
            raise ProtocolError("all score samples must come from the same test set")
    k = len(m1)
    rng = np.random.default_rng(rng_state)
    everyone = list(m1) + list(m2)
    resamples = _resample_indices(len(ref), iterations, rng, _metric_ok(metric, everyone))
    boot1 = np.array([[metric(s.subset(idx)) for idx in resamples] for s in m1])
    boot2 = np.array([[metric(s.subset(idx)) for idx in resamples] for s in m2])
    point1 = np.array([metric(s) for s in m1])
    point2 = np.array([metric(s) for s in m2])
    outcomes, diffs, cis = [], [], []
    for i in range(k):
        row_o, row_d, row_c = [], [], []
        for j in range(k):
            lo, hi = percentile_ci(boot1[i] - boot2[j], alpha)
            if lo > 0:
                row_o.append(M1_BETTER)
            elif hi < 0:
                row_o.append(M2_BETTER)
            else:
                row_o.append(OVERLAPS_ZERO)
            row_d.append(point1[i] - point2[j])
            row_c.append((lo, hi))
        outcomes.append(row_o)
        diffs.append(row_d)
        cis.append(row_c)
    return verdict_from_outcomes(outcomes, diffs, cis, getattr(metric, "__name__", str(metric)))


def mean_sem(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and standard error (sample std / sqrt(k)); SEM is None for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInputError("mean of no values")
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))
