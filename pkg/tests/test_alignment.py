from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confgate.alignment import (
    AlignmentGate,
    BatchRecord,
    Predicate,
    align,
    alignment_rank,
    calibrate_tau,
    cvar,
    cvar_gap_predicate,
    deploy,
    dropped_set,
    kept_set,
    median_gap_predicate,
    minimal_strictness,
    rescale_energy,
    strictness_grid,
    threshold_predicate,
)
from confgate.errors import DimensionMismatch, EmptyInput

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def records(draw, max_n=12):
    n = draw(st.integers(1, max_n))
    q = draw(st.lists(unit, min_size=n, max_size=n))
    s = draw(st.lists(unit, min_size=n, max_size=n))
    return BatchRecord(np.array(q), np.array(s))


# sets and CVaR


def test_kept_set_examples():
    rec = BatchRecord([0.2, 0.5, 0.9])
    assert kept_set(rec, 0.5).tolist() == [2]
    assert kept_set(rec, 1.0).size == 0
    assert kept_set(rec, 0.0).tolist() == [0, 1, 2]
    assert dropped_set(rec, 0.5).tolist() == [0, 1]


@given(records(), unit, unit)
def test_kept_set_antitone(rec, a, b):
    lo, hi = sorted((a, b))
    assert set(kept_set(rec, hi)) <= set(kept_set(rec, lo))


@given(records(), unit)
def test_kept_and_dropped_partition(rec, tau):
    k, d = set(kept_set(rec, tau)), set(dropped_set(rec, tau))
    assert not k & d and k | d == set(range(rec.q_scores.size))


def test_cvar_examples():
    assert cvar([0.9, 0.5, 0.1], 0.5) == pytest.approx(0.7)
    assert cvar([0.2, 0.4, 0.9], 1e-9) == pytest.approx(0.5)
    assert cvar([0.3], 0.99) == 0.3
    with pytest.raises(EmptyInput):
        cvar([], 0.5)


@given(st.lists(unit, min_size=1, max_size=20), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_cvar_monotone_in_tail(vals, a, b):
    lo, hi = sorted((a, b))
    assert cvar(vals, lo) <= cvar(vals, hi) + 1e-12


@given(st.lists(unit, min_size=1, max_size=20), st.floats(0.01, 0.99))
def test_cvar_between_mean_and_max(vals, q):
    c = cvar(vals, q)
    assert np.mean(vals) - 1e-12 <= c <= max(vals)


# predicates


def test_cvar_gap_examples():
    rec = BatchRecord([0.9, 0.8, 0.1, 0.2], [0.0, 0.0, 1.0, 1.0])
    assert cvar_gap_predicate(rec, 0.5, 0.5, 0.5)
    assert not cvar_gap_predicate(rec, 0.95, 0.5, 0.0)
    assert cvar_gap_predicate(BatchRecord([0.9, 0.1], [0.0, 1.0]), 0.5, 0.5, 0.5)


def test_cvar_gap_false_when_nothing_dropped():
    assert not cvar_gap_predicate(BatchRecord([0.4, 0.6], [0.0, 1.0]), 0.0, 0.5, -1.0)


def test_median_gap_examples():
    rec = BatchRecord([0.1, 0.1, 0.9], [0.8, 0.8, 0.1])
    assert median_gap_predicate(rec, 0.5, 0.3)
    assert median_gap_predicate(rec, 0.0, 0.0)
    assert not median_gap_predicate(rec, 0.0, 0.01)
    assert not median_gap_predicate(rec, 0.95, -1.0)


def test_threshold_predicate_examples():
    assert threshold_predicate(lambda t: 1.0, 1.0)(0.3)
    p = threshold_predicate(lambda t: t, 0.5)
    assert [p(t) for t in (0.2, 0.5, 0.7)] == [False, True, True]
    assert not any(threshold_predicate(lambda t: t / 2, 0.6)(t) for t in np.linspace(0, 1, 11))


@given(st.lists(unit, min_size=1, max_size=15), unit)
def test_threshold_predicate_preserves_monotone_steps(steps, r):
    levels = np.maximum.accumulate(np.asarray(steps))
    grid = np.linspace(0, 1, levels.size)
    curve = lambda t: float(levels[np.searchsorted(grid, t, side="right") - 1])  # noqa: E731
    pred = threshold_predicate(curve, r)
    vals = [pred(t) for t in grid]
    assert vals == sorted(vals)


def test_predicate_descriptor_validation():
    with pytest.raises(ValueError):
        Predicate("bogus")
    with pytest.raises(ValueError):
        Predicate("thresholded")
    p = Predicate("thresholded", r=0.2)
    rec = BatchRecord([0.9, 0.1], [0.0, 1.0])
    assert p(rec, 0.5) and not p(rec, 0.95)


def test_predicate_needs_severities():
    with pytest.raises(EmptyInput):
        Predicate()(BatchRecord([0.5, 0.6]), 0.5)


def test_record_shape_check():
    with pytest.raises(DimensionMismatch):
        BatchRecord([0.1, 0.2], [0.1])


# strictness


class _PassAt:
    def __init__(self, taus):
        self.taus = set(taus)

    def __call__(self, rec, tau):
        return tau in self.taus


def test_minimal_strictness_examples():
    rec = BatchRecord([0.2, 0.4, 0.6, 0.8])
    prof = minimal_strictness(rec, _PassAt({0.6, 0.8}))
    assert prof.S == 0.6
    # the grid ends at 1, where this predicate fails again
    assert prof.monotone_violations == 1 and prof.interior_violations == 0
    assert minimal_strictness(rec, lambda r, t: False).S == 1.0
    assert minimal_strictness(rec, lambda r, t: True).S == 0.0


def test_violation_counting():
    rec = BatchRecord([0.2, 0.4, 0.6, 0.8])
    prof = minimal_strictness(rec, _PassAt({0.2, 0.6}))
    assert prof.S == 0.2 and prof.monotone_violations == 2
    # the flip at 0.4 happens while responses are still kept; the one at 0.8 does not
    assert prof.interior_violations == 1


@given(records())
def test_grid_invariants(rec):
    g = strictness_grid(rec)
    assert g[0] == 0.0 and g[-1] == 1.0
    assert set(np.unique(rec.q_scores)) <= set(g)
    prof = minimal_strictness(rec, Predicate())
    assert prof.S in set(g) | {1.0}


def test_calibrate_tau_examples():
    S = np.arange(9) / 10
    g = calibrate_tau(S, 0.2)
    assert g.K_index == 8 and g.tau_hat == 0.7
    assert calibrate_tau(np.zeros(5), 0.05).tau_hat == 1.0
    assert calibrate_tau(np.zeros(5), 0.05).K_index == 6
    assert calibrate_tau(np.zeros(9), 0.2).tau_hat == 0.0
    with pytest.raises(EmptyInput):
        calibrate_tau([], 0.1)


@given(st.lists(unit, min_size=1, max_size=30), st.floats(0.01, 0.99))
def test_calibrate_tau_rank(S, alpha):
    g = calibrate_tau(S, alpha)
    K = alignment_rank(len(S), alpha)
    assert g.K_index == K
    assert g.tau_hat == (1.0 if K > len(S) else sorted(S)[K - 1])


def test_s_coverage_monte_carlo():
    # exchangeable S values: Pr(S_new <= tau_hat) >= 1 - alpha
    rng = np.random.default_rng(0)
    hits = []
    for _ in range(2000):
        S = rng.random(41)
        hits.append(S[-1] <= calibrate_tau(S[:-1], 0.1).tau_hat)
    p = np.mean(hits)
    assert p >= 0.9 - 3 * np.sqrt(0.09 / 2000)


# deployment


def test_deploy_extremes():
    rec = BatchRecord([0.3, 0.7], [0.2, 0.9])
    dep = deploy(AlignmentGate(1.0, 0.1, 5, 6), rec)
    assert dep.kept.size == 0 and dep.passed is False
    dep = deploy(AlignmentGate(0.0, 0.1, 5, 6), rec)
    assert dep.kept.tolist() == [0, 1]


@given(records(), unit)
def test_deploy_is_label_free(rec, tau):
    gate = AlignmentGate(tau, 0.1, 10, 10)
    a, b = deploy(gate, rec), deploy(gate, rec.without_severities())
    np.testing.assert_array_equal(a.kept, b.kept)
    assert b.delta_cvar is None


def test_deploy_reports_gaps():
    rec = BatchRecord([0.9, 0.8, 0.1, 0.2], [0.1, 0.2, 0.9, 0.7])
    dep = deploy(AlignmentGate(0.5, 0.1, 5, 5, Predicate(tail_q=0.5)), rec)
    assert dep.delta_cvar == pytest.approx(0.9 - 0.2)
    assert dep.delta_fs == pytest.approx(0.8 - 0.15)
    assert dep.median_reduction == pytest.approx(0.45 - 0.15)
    assert dep.passed


def test_align_end_to_end():
    recs = [BatchRecord([0.9, 0.8, 0.1, 0.2], [0.1, 0.2, 0.9, 0.7])] * 9
    gate, profiles = align(recs, 0.2, Predicate(tail_q=0.5))
    assert len(profiles) == 9 and gate.tau_hat == profiles[0].S


def test_rescale_energy():
    np.testing.assert_allclose(rescale_energy([1.0, 2.0], 4), [0.0, 1.0])
    with pytest.raises(ValueError):
        rescale_energy([1.0], 1)
