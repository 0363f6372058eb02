"""Brute-force reference computations used to cross-check the main implementations.

Nothing here imports from the rest of the package; each oracle is written
directly from its textbook definition with explicit loops, and is only
meant for small inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import mpmath


@dataclass(frozen=True)
class OracleCase:
    oracle_id: str
    inputs: Any
    expected: Any
    tolerance: float


def oracle_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Fraction of (positive, negative) pairs in which the positive scores higher; ties count 1/2."""
    pos = [float(s) for s, y in zip(scores, labels) if y == 1]
    neg = [float(s) for s, y in zip(scores, labels) if y != 1]
    if len(pos) * len(neg) > 10 ** 6:
        raise ValueError("oracle_auc is restricted to small inputs")
    if not pos or not neg:
        raise ValueError("need both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def _stab(z: float, eps: float) -> float:
    return z + eps * (1.0 if z >= 0 else -1.0)


def oracle_lrp_toy(weights: Sequence[Sequence[Sequence[float]]], x: Sequence[float], target: int,
                   biases: Sequence[Sequence[float]] | None = None, eps: float = 0.0) -> list[float]:
    """Epsilon-rule LRP on a dense network ``W_L relu(... relu(W_1 x + b_1)) + b_L``.

    ``weights[l][k][j]`` connects input j to output k of layer l. Relevance starts as
    the target logit on the target unit and zero elsewhere.
    """
    n_layers = len(weights)
    biases = biases or [[0.0] * len(w) for w in weights]
    acts = [[float(v) for v in x]]
    pre = []
    for l in range(n_layers):
        a = acts[-1]
        z = []
        for k in range(len(weights[l])):
            s = biases[l][k]
            for j in range(len(a)):
                s += weights[l][k][j] * a[j]
            z.append(s)
        pre.append(z)
        acts.append(z if l == n_layers - 1 else [max(0.0, v) for v in z])
    R = [0.0] * len(pre[-1])
    R[target] = pre[-1][target]
    for l in reversed(range(n_layers)):
        a = acts[l]
        z = pre[l]
        R_in = [0.0] * len(a)
        for k in range(len(z)):
            d = _stab(z[k], eps)
            if d == 0:
                continue
            for j in range(len(a)):
                R_in[j] += a[j] * weights[l][k][j] / d * R[k]
        R = R_in
    return R


def oracle_pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Pearson r and the two-sided p-value of the t test with n - 2 degrees of freedom."""
    n = len(x)
    if n != len(y) or n < 3:
        raise ValueError("need equal lengths >= 3")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # two-sided tail of Student t via the regularized incomplete beta function
    p = float(mpmath.betainc(df / 2.0, 0.5, 0, df / (df + t2), regularized=True))
    return r, p


def oracle_majority_positive_tie(labels: Sequence[int]) -> int:
    """Joined label of binary quadrant labels: positive when positives are at least half."""
    ones = 0
    for y in labels:
        if y == 1:
            ones += 1
    return 1 if 2 * ones >= len(labels) else 0


def oracle_bilinear(grid: Sequence[Sequence[float]], out_h: int, out_w: int) -> list[list[float]]:
    """Bilinear resampling with half-pixel centres and edge clamping, written out by hand."""
    gh, gw = len(grid), len(grid[0])
    out = []
    for i in range(out_h):
        sy = min(max((i + 0.5) * gh / out_h - 0.5, 0.0), gh - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, gh - 1)
        fy = sy - y0
        row = []
        for j in range(out_w):
            sx = min(max((j + 0.5) * gw / out_w - 0.5, 0.0), gw - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, gw - 1)
            fx = sx - x0
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def _disc_offsets(radius: int) -> list[tuple[int, int]]:
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]


def oracle_binary_opening(mask: Sequence[Sequence[bool]], radius: int) -> list[list[bool]]:
    """Erosion then dilation by a disc; outside the image counts as set for the erosion
    and as unset for the dilation."""
    h, w = len(mask), len(mask[0])
    offs = _disc_offsets(radius)

    def at(m, y, x, outside):
        return m[y][x] if 0 <= y < h and 0 <= x < w else outside

    eroded = [[all(at(mask, y + dy, x + dx, True) for dy, dx in offs) for x in range(w)] for y in range(h)]
    return [[any(at(eroded, y - dy, x - dx, False) for dy, dx in offs) for x in range(w)] for y in range(h)]


def oracle_hue_masses(pixels: Sequence[Sequence[float]], bins: int, saturation_cutoff: float) -> list[float]:
    """Index 0: share of pixels with saturation below the cutoff; 1 + i: share in hue bin i."""
    import colorsys

    counts = [0] * (bins + 1)
    for r, g, b in pixels:
        hue, sat, _ = colorsys.rgb_to_hsv(r, g, b)
        if sat < saturation_cutoff:
            counts[0] += 1
        else:
            counts[1 + min(int(hue * bins), bins - 1)] += 1
    return [c / len(pixels) for c in counts]


def oracle_threshold_met(qualifying: int, k: int) -> bool:
    """Fraction of qualifying pairings at least k(k+1)/(2k^2), compared in exact integers."""
    return qualifying * 2 * k * k >= k * (k + 1) * k * k


# Every example whose expected value is derived rather than quoted is listed here;
# the test suite carries one test per id (tests/test_derived.py) and fails if any is missing.
DERIVED_CASE_IDS = (
    "repatch_majority_16_combinations",
    "weighted_sampler_law_of_large_numbers",
    "botnet_attention_accessor",
    "hybrid_feature_perturbation",
    "multiseed_distinct_val_auc",
    "auc_four_point",
    "accuracy_ci_contains_point",
    "threshold_boundary_k5",
    "lrp_toy_vs_oracle",
    "hybrid_twin_branches",
    "bilinear_center",
    "opening_isolated_pixel",
    "point_biserial_2x2",
    "cycle_error_decreases",
    "hue_halves",
    "breakhis_exclusion",
    "end_to_end_manifest",
)

FROZEN_CASES = (
    OracleCase("auc_four_point", ((0.1, 0.4, 0.35, 0.8), (0, 0, 1, 1)), 0.75, 1e-12),
    # r = 0.7 / sqrt(0.5); with n - 2 = 2 degrees of freedom the two-sided p is 1 - r
    OracleCase("point_biserial_2x2", ((0.1, 0.9, 0.2, 0.8), (0, 1, 0, 1)),
               (0.98994949366116653, 0.010050506338833465), 1e-9),
    OracleCase("bilinear_center", (((0.0, 1.0), (1.0, 0.0)), 3), 0.5, 1e-12),
    OracleCase("threshold_boundary_k5", (15, 5), True, 0.0),
    OracleCase("hue_halves", ("red|green", 64), {1: 0.5, 22: 0.5}, 1e-12),
)
