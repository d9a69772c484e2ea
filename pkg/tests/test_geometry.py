from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confgate.errors import BatchTooSmall, DimensionMismatch, NotNormalized, ZeroVectorRow
from confgate.geometry import (
    atypical_score,
    batch_scores,
    gram,
    interaction_energy,
    is_unit_norm,
    loo_residuals,
    score_against_base,
    scores_against_base,
    unit_normalize,
)

from .conftest import unit_rows


def matrices(max_n=16, max_d=12):
    shape = st.tuples(st.integers(1, max_n), st.integers(1, max_d))
    elems = st.floats(-10, 10, allow_nan=False, width=64)
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=elems)).filter(
        lambda X: np.all(np.linalg.norm(X, axis=1) > 1e-3))


def test_identical_pair_energy():
    V = np.array([[1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(interaction_energy(gram(V)), [np.sqrt(2)] * 2)
    np.testing.assert_allclose(batch_scores(V)[1], 0.0, atol=1e-12)


def test_orthogonal_rows_sit_at_lower_bound():
    e, phi = batch_scores(np.eye(3))
    np.testing.assert_allclose(e, 1.0)
    np.testing.assert_allclose(phi, 1 - 1 / np.sqrt(3))


def test_three_four_normalizes():
    np.testing.assert_allclose(unit_normalize([[3.0, 4.0]]), [[0.6, 0.8]])


def test_zero_row_rejected():
    with pytest.raises(ZeroVectorRow) as info:
        unit_normalize([[1.0, 0.0], [0.0, 0.0]])
    assert info.value.row == 1


def test_unnormalized_scoring_rejected():
    with pytest.raises(NotNormalized):
        batch_scores([[3.0, 4.0], [1.0, 0.0]])


def test_single_row_batch():
    e, phi = batch_scores([[0.0, 1.0]])
    assert e[0] == pytest.approx(1.0)
    assert phi[0] == pytest.approx(0.0)


@given(matrices())
def test_energy_bounds_hold(X):
    V = unit_normalize(X)
    n = V.shape[0]
    e = interaction_energy(gram(V))
    assert np.all(e >= 1 - 1e-9) and np.all(e <= np.sqrt(n) + 1e-9)
    phi = atypical_score(e)
    assert np.all((phi >= 0) & (phi <= 1))


@given(matrices(), st.integers(0, 2**32 - 1))
def test_row_permutation_permutes_energies(X, seed):
    V = unit_normalize(X)
    p = np.random.default_rng(seed).permutation(V.shape[0])
    np.testing.assert_allclose(batch_scores(V[p])[0], batch_scores(V)[0][p], atol=1e-12)


@given(matrices(max_d=6), st.integers(0, 2**32 - 1))
def test_rotation_invariance(X, seed):
    V = unit_normalize(X)
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((V.shape[1],) * 2))
    np.testing.assert_allclose(batch_scores(V @ Q)[0], batch_scores(V)[0], atol=1e-9)


@given(matrices(), st.integers(0, 2**32 - 1))
def test_sign_flip_invariance(X, seed):
    V = unit_normalize(X)
    s = np.random.default_rng(seed).choice([-1.0, 1.0], size=(V.shape[0], 1))
    np.testing.assert_allclose(batch_scores(V * s)[0], batch_scores(V)[0], atol=1e-12)


def test_gram_symmetric_unit_diagonal(rng):
    V = unit_rows(rng, 7, 5)
    G = gram(V)
    np.testing.assert_allclose(G, G.T)
    np.testing.assert_allclose(np.diag(G), 1.0)


def test_score_against_base_matches_definition(rng):
    base, v = unit_rows(rng, 6, 4), unit_rows(rng, 1, 4)[0]
    want = 1 - np.linalg.norm(base @ v) / np.sqrt(6)
    assert score_against_base(v, base) == pytest.approx(want)
    np.testing.assert_allclose(scores_against_base(v[None], base), [want])


def test_score_against_base_range():
    base = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert score_against_base([1.0, 0.0], base) == pytest.approx(0.0)
    assert score_against_base([0.0, 1.0], base) == pytest.approx(1.0)


def test_score_against_base_dimension_check():
    with pytest.raises(DimensionMismatch):
        score_against_base([1.0, 0.0, 0.0], np.eye(2))


def test_loo_residuals_match_explicit_loop(rng):
    V = unit_rows(rng, 9, 6)
    got = loo_residuals(V)
    want = [score_against_base(V[i], np.delete(V, i, axis=0)) for i in range(9)]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_loo_needs_two_rows():
    with pytest.raises(BatchTooSmall):
        loo_residuals([[1.0, 0.0]])


def test_is_unit_norm():
    assert is_unit_norm(np.eye(3))
    assert not is_unit_norm([[2.0, 0.0]])
