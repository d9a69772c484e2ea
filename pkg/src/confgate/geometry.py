"""Gram-matrix geometry of response embeddings.

Responses are stacked as rows of an ``(n, d)`` array ``V``. With unit-norm
rows the Gram matrix ``G = V V^T`` holds pairwise cosines, and the
interaction energy of response ``i`` is the Euclidean norm of column ``i``::

    e_i = ||G[:, i]||_2 = sqrt(sum_j cos^2(v_i, v_j))

which lies in ``[1, sqrt(n)]``. The atypical score rescales it to ``[0, 1]``
(0 = full consensus, 1 = orthogonal to everything).

The leave-one-out conformity score drops the self term, so its energy lies
in ``[0, sqrt(m)]`` for a base of ``m`` rows and the score bound is 1.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BatchTooSmall, DimensionMismatch, NotNormalized, ZeroVectorRow

NORM_TOL = 1e-9
ZERO_NORM = 1e-12
#: upper bound of every conformity score produced here
SCORE_BOUND = 1.0


def _as_score(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Clip to ``[0, 1]`` and snap round-off within ``ZERO_NORM`` of either end."""
    x = np.clip(x, 0.0, 1.0)
    x[x < ZERO_NORM] = 0.0
    x[x > 1.0 - ZERO_NORM] = 1.0
    return x


def as_embeddings(V: ArrayLike) -> NDArray[np.float64]:
    """Coerce input to a 2-D float64 array with ``n >= 1`` rows and ``d >= 1``."""
    arr = np.asarray(V, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"expected an (n, d) array with n, d >= 1, got shape {arr.shape}")
    return arr


def is_unit_norm(V: ArrayLike, tol: float = NORM_TOL) -> bool:
    arr = as_embeddings(V)
    return bool(np.all(np.abs(np.linalg.norm(arr, axis=1) - 1.0) <= tol))


def _require_unit(V: NDArray[np.float64]) -> None:
    if not is_unit_norm(V):
        raise NotNormalized("embeddings must be unit-normalized first (see unit_normalize)")


def unit_normalize(V: ArrayLike) -> NDArray[np.float64]:
    """Scale every row to unit Euclidean norm.

    Raises
    ------
    ZeroVectorRow
        If some row has norm below ``1e-12``.
    """
    arr = as_embeddings(V)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVectorRow(int(bad[0]))
    return arr / norms[:, None]


def gram(V: ArrayLike) -> NDArray[np.float64]:
    """Uncentered Gram matrix ``V @ V.T``."""
    arr = as_embeddings(V)
    return arr @ arr.T


def interaction_energy(G: ArrayLike) -> NDArray[np.float64]:
    """Column norms of a Gram matrix.

    For a Gram matrix built from unit rows every value is in ``[1, sqrt(n)]``.
    """
    G = np.asarray(G, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->j", G, G))


def atypical_score(energy: ArrayLike, bound: float | None = None) -> NDArray[np.float64]:
    """Map energies to ``1 - e / bound``, clamped to ``[0, 1]``.

    ``bound`` defaults to ``sqrt(n)``, the supremum of the energy for ``n``
    unit-norm responses.
    """
    e = np.asarray(energy, dtype=np.float64)
    if bound is None:
        bound = np.sqrt(e.size)
    if bound <= 0:
        raise ValueError("energy bound must be positive")
    return _as_score(np.atleast_1d(1.0 - e / bound)).reshape(e.shape)


def batch_scores(V: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Energies and atypical scores of one batch of unit-norm embeddings."""
    arr = as_embeddings(V)
    _require_unit(arr)
    e = interaction_energy(gram(arr))
    return e, atypical_score(e, np.sqrt(arr.shape[0]))


def score_against_base(v: ArrayLike, base: ArrayLike) -> float:
    """Conformity score of ``v`` relative to ``m`` base rows.

    ``phi = 1 - ||base @ v|| / sqrt(m)``. The self term is absent, so the
    energy can reach 0 and ``phi`` covers all of ``[0, 1]``.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    B = as_embeddings(base)
    if v.shape[0] != B.shape[1]:
        raise DimensionMismatch(f"vector has d={v.shape[0]}, base has d={B.shape[1]}")
    _require_unit(v[None, :])
    _require_unit(B)
    e = np.sqrt(np.sum((B @ v) ** 2))
    return float(_as_score(np.atleast_1d(1.0 - e / np.sqrt(B.shape[0])))[0])


def scores_against_base(Y: ArrayLike, base: ArrayLike) -> NDArray[np.float64]:
    """Vectorised :func:`score_against_base` for every row of ``Y``."""
    Y = as_embeddings(Y)
    B = as_embeddings(base)
    if Y.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"rows have d={Y.shape[1]}, base has d={B.shape[1]}")
    _require_unit(Y)
    _require_unit(B)
    C = B @ Y.T
    e = np.sqrt(np.einsum("ij,ij->j", C, C))
    return _as_score(1.0 - e / np.sqrt(B.shape[0]))


def loo_residuals(batch: ArrayLike) -> NDArray[np.float64]:
    """Within-batch leave-one-out residuals.

    Residual ``i`` scores row ``i`` against the other ``I - 1`` rows.

    Raises
    ------
    BatchTooSmall
        If the batch has fewer than two rows.
    """
    V = as_embeddings(batch)
    n = V.shape[0]
    if n < 2:
        raise BatchTooSmall(f"leave-one-out needs at least 2 rows, got {n}")
    _require_unit(V)
    G = gram(V)
    np.fill_diagonal(G, 0.0)
    e = np.sqrt(np.einsum("ij,ij->j", G, G))
    return _as_score(1.0 - e / np.sqrt(n - 1))
