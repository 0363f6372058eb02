"""The oracles themselves: hand-checkable examples and cross-checks against third-party code."""
import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage, stats

from histoeval import oracles as O


def test_auc_trivial():
    assert O.oracle_auc([0.1, 0.9], [0, 1]) == 1.0
    assert O.oracle_auc([0.9, 0.1], [0, 1]) == 0.0
    assert O.oracle_auc([0.5, 0.5], [0, 1]) == 0.5


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_matches_mann_whitney(pairs):
    s, y = map(list, zip(*pairs))
    assume(0 < sum(y) < len(y))
    pos = [a for a, b in pairs if b == 1]
    neg = [a for a, b in pairs if b == 0]
    u = stats.mannwhitneyu(pos, neg).statistic
    assert O.oracle_auc(s, y) == pytest.approx(u / (len(pos) * len(neg)), abs=1e-12)


def test_lrp_toy_by_hand():
    # one hidden unit: z1 = 2 + 1 = 3, out = 3 * 1; relevance 3 splits 2:1 over the inputs
    assert O.oracle_lrp_toy([[[2.0, 1.0]], [[1.0]]], [1.0, 1.0], 0) == [2.0, 1.0]
    # a dead ReLU passes nothing back
    assert O.oracle_lrp_toy([[[-1.0, -1.0]], [[1.0]]], [1.0, 1.0], 0) == [0.0, 0.0]


def test_lrp_toy_eps_shrinks_relevance():
    r0 = O.oracle_lrp_toy([[[1.0, 1.0]]], [0.5, 0.5], 0)
    r1 = O.oracle_lrp_toy([[[1.0, 1.0]]], [0.5, 0.5], 0, eps=1.0)
    assert sum(r0) == pytest.approx(1.0) and sum(r1) == pytest.approx(0.5)


def test_pearson_by_hand():
    r, p = O.oracle_pearson([1, 2, 3], [2, 4, 6])
    assert r == 1.0 and p == 0.0
    with pytest.raises(ValueError):
        O.oracle_pearson([1, 2], [1, 2])


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), arrays(np.float64, 8, elements=st.floats(-5, 5)))
def test_pearson_matches_scipy(x, y):
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    r, p = O.oracle_pearson(x.tolist(), y.tolist())
    ref = stats.pearsonr(x, y)
    assert r == pytest.approx(ref[0], abs=1e-9)
    assert p == pytest.approx(ref[1], abs=1e-7)


def test_majority_by_hand():
    assert O.oracle_majority_positive_tie([1, 1, 0, 0]) == 1
    assert O.oracle_majority_positive_tie([1, 0, 0, 0]) == 0
    assert O.oracle_majority_positive_tie([1]) == 1


def test_bilinear_identity_and_constant():
    g = [[1.0, 2.0], [3.0, 4.0]]
    assert O.oracle_bilinear(g, 2, 2) == g
    assert O.oracle_bilinear([[7.0]], 3, 4) == [[7.0] * 4] * 3


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-3, 3)),
       st.integers(1, 12), st.integers(1, 12))
def test_bilinear_matches_torch_half_pixel(grid, oh, ow):
    ref = torch.nn.functional.interpolate(torch.from_numpy(grid)[None, None], size=(oh, ow), mode="bilinear",
                                          align_corners=False)[0, 0].numpy()
    np.testing.assert_allclose(O.oracle_bilinear(grid.tolist(), oh, ow), ref, atol=1e-12)


def test_opening_by_hand():
    m = [[False] * 5 for _ in range(5)]
    m[2][2] = True
    assert not any(map(any, O.oracle_binary_opening(m, 1)))
    full = [[True] * 4 for _ in range(4)]
    assert O.oracle_binary_opening(full, 2) == full
    assert O.oracle_binary_opening(m, 0) == m


@given(arrays(np.bool_, st.tuples(st.integers(1, 8), st.integers(1, 8))), st.integers(0, 2))
def test_opening_matches_scipy(mask, radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disc = yy ** 2 + xx ** 2 <= radius ** 2
    er = ndimage.binary_erosion(mask, disc, border_value=1)
    ref = ndimage.binary_dilation(er, disc, border_value=0)
    np.testing.assert_array_equal(O.oracle_binary_opening(mask.tolist(), radius), ref)


def test_hue_masses_by_hand():
    assert O.oracle_hue_masses([(1, 0, 0), (0.5, 0.5, 0.5)], 4, 0.05) == [0.5, 0.5, 0.0, 0.0, 0.0]
    # pure blue has hue 2/3 -> bin 2 of 4 -> index 3
    assert O.oracle_hue_masses([(0, 0, 1)], 4, 0.05)[3] == 1.0


@pytest.mark.parametrize("k", range(1, 12))
def test_threshold_against_fractions(k):
    from fractions import Fraction

    need = Fraction(k * (k + 1), 2 * k * k)
    for q in range(k * k + 1):
        assert O.oracle_threshold_met(q, k) == (Fraction(q, k * k) >= need)


def _recompute(case):
    if case.oracle_id == "auc_four_point":
        return O.oracle_auc(*case.inputs)
    if case.oracle_id == "point_biserial_2x2":
        return O.oracle_pearson(*case.inputs)
    if case.oracle_id == "bilinear_center":
        grid, n = case.inputs
        return O.oracle_bilinear([list(r) for r in grid], n, n)[n // 2][n // 2]
    if case.oracle_id == "threshold_boundary_k5":
        return O.oracle_threshold_met(*case.inputs)
    if case.oracle_id == "hue_halves":
        masses = O.oracle_hue_masses([(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)], case.inputs[1], 0.05)
        return {i: m for i, m in enumerate(masses) if m}
    raise KeyError(case.oracle_id)


@pytest.mark.parametrize("case", O.FROZEN_CASES, ids=lambda c: c.oracle_id)
def test_frozen_cases_reproduce(case):
    got = _recompute(case)
    if isinstance(case.expected, tuple):
        assert got == pytest.approx(case.expected, abs=case.tolerance)
    elif isinstance(case.expected, dict):
        assert got.keys() == case.expected.keys()
        assert all(math.isclose(got[k], v, abs_tol=case.tolerance) for k, v in case.expected.items())
    elif isinstance(case.expected, bool):
        assert got is case.expected
    else:
        assert got == pytest.approx(case.expected, abs=case.tolerance)


def test_frozen_ids_are_derived_ids():
    assert {c.oracle_id for c in O.FROZEN_CASES} <= set(O.DERIVED_CASE_IDS)
    assert len(set(O.DERIVED_CASE_IDS)) == len(O.DERIVED_CASE_IDS) == 17


def test_oracles_do_not_import_the_package():
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(O))
    mods = [n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)]
    mods += [a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names]
    assert not any(m is None or m.startswith("histoeval") or m.startswith(".") for m in mods if m != "__future__")
