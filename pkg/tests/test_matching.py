from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from fsodbench.geometry import BBox
from fsodbench.matching import assignment_cost, hungarian, match_detections, match_image
from oracles import greedy_free_brute_match, min_assignment_cost
from strategies import boxes


@dataclass(frozen=True)
class Box:
    bbox: BBox
    class_label: str


def test_hungarian_examples():
    # [DERIVED] the two permutations cost 4+3=7 and 1+2=3
    pairs = hungarian([[4, 1], [2, 3]])
    assert set(pairs) == {(0, 1), (1, 0)}
    assert assignment_cost([[4, 1], [2, 3]], pairs) == 3
    assert hungarian([[0, 9], [9, 0]]) == [(0, 0), (1, 1)]
    assert hungarian([5, 2, 7]) == [(0, 1)]
    assert hungarian([[5], [2], [7]]) == [(1, 0)]


def test_hungarian_empty_and_errors():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian([]) == []
    with pytest.raises(ValueError):
        hungarian([[1, -1]])
    with pytest.raises(ValueError):
        hungarian([[1, np.inf]])


def test_hungarian_ties_prefer_low_indices():
    assert hungarian(np.zeros((2, 3))) == [(0, 0), (1, 1)]
    assert hungarian(np.ones((3, 2))) == [(0, 0), (1, 1)]


matrices = st.tuples(st.integers(1, 7), st.integers(1, 7)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 100, allow_nan=False, width=32))
)


@given(matrices)
@settings(max_examples=300)
def test_hungarian_equals_brute_force(c):
    pairs = hungarian(c)
    assert len(pairs) == min(c.shape)
    assert len({r for r, _ in pairs}) == len(pairs) == len({k for _, k in pairs})
    assert assignment_cost(c, pairs) == pytest.approx(min_assignment_cost(c.tolist()), abs=1e-9)


@given(st.tuples(st.integers(1, 30), st.integers(1, 30)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 1, allow_nan=False))))
@settings(max_examples=100)
def test_hungarian_matches_scipy(c):
    r, k = linear_sum_assignment(c)
    assert assignment_cost(c, hungarian(c)) == pytest.approx(c[r, k].sum(), abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.floats(-5, 50))
def test_row_constant_shift_preserves_assignment(seed, n, shift):
    rng = np.random.default_rng(seed)
    c = rng.random((n, n)) * 10
    row = int(rng.integers(n))
    shifted = c.copy()
    shifted[row] += shift
    shifted -= min(0.0, shifted.min())  # keep entries non-negative
    # continuous random entries: no ties, so the pairing is unique
    assert hungarian(c) == hungarian(shifted)


def test_identity_predictions_all_tp():
    gts = [Box(BBox(0, 0, 10, 10), "a"), Box(BBox(20, 20, 40, 40), "b"), Box(BBox(5, 5, 25, 25), "a")]
    for tau in (0.05, 0.5, 1.0):
        out = match_detections(list(gts), gts, tau)
        assert out.counts == (3, 0, 0)
        assert all(p.iou == 1.0 for p in out.tp_pairs)


def test_flipped_labels_never_match():
    gts = [Box(BBox(0, 0, 10, 10), "a"), Box(BBox(20, 20, 40, 40), "b")]
    preds = [Box(g.bbox, "b" if g.class_label == "a" else "a") for g in gts]
    assert match_detections(preds, gts, 0.05).counts == (0, 2, 2)


def test_one_to_one():
    g = Box(BBox(0, 0, 10, 10), "a")
    out = match_detections([g, g], [g], 0.5)
    assert out.counts == (1, 1, 0)


def test_threshold_validated():
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


def test_empty_inputs():
    assert match_detections([], [], 0.5).counts == (0, 0, 0)
    g = Box(BBox(0, 0, 10, 10), "a")
    assert match_detections([], [g], 0.5).counts == (0, 0, 1)
    assert match_detections([g], [], 0.5).counts == (0, 1, 0)


labeled = st.builds(Box, boxes(max_coord=60, min_side=4), st.sampled_from("ab"))


@given(st.lists(labeled, max_size=6), st.lists(labeled, max_size=6))
@settings(max_examples=200)
def test_outcome_invariants_and_nesting(preds, gts):
    m = match_image(preds, gts)
    prev = None
    for tau in np.linspace(0.05, 1.0, 20):
        out = m.at(float(tau))
        tp, fp, fn = out.counts
        assert tp + fp == len(preds) and tp + fn == len(gts)
        for p in out.tp_pairs:
            assert p.iou >= tau
            assert preds[p.pred].class_label == gts[p.gt].class_label
        tps = {(p.pred, p.gt) for p in out.tp_pairs}
        if prev is not None:
            assert tps <= prev
        prev = tps


@given(st.lists(boxes(max_coord=60, min_side=4), max_size=5), st.lists(boxes(max_coord=60, min_side=4), max_size=5))
@settings(max_examples=100)
def test_single_class_matching_maximizes_total_iou(pb, gb):
    m = match_image([Box(b, "a") for b in pb], [Box(b, "a") for b in gb])
    expected = greedy_free_brute_match([b.as_list() for b in pb], [b.as_list() for b in gb])
    assert sum(p.iou for p in m.pairs) == pytest.approx(float(sum(expected)), abs=1e-9)
