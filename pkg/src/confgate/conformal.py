"""Conformal calibration of residual thresholds.

Four calibrators are provided, all returning a :class:`CalibratedGate`:

* :func:`split_ucp` -- classical split conformal on a calibration set.
* :func:`full_ucp` -- full conformal p-values scanned over candidate residuals.
* :func:`bucp` -- pooled within-batch leave-one-out residuals with the
  batch-adjusted level ``1 - delta_J / J``, ``delta_J = (J + 1) alpha - 1``.
* :func:`bbucp` -- as ``bucp`` but each batch contributes ``K`` bootstrap
  replicates.

Quantiles use the order-statistic convention: the ``level``-quantile of ``m``
values is the ``ceil(level * m)``-th smallest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import EmptyBag, InconsistentBatchSizes
from .geometry import SCORE_BOUND

CONVENTION = "order_stat_ceil"
DEFAULT_K = 200
METHODS = ("split", "full", "bucp", "bbucp")

# guards ceil() against products such as 0.7 * 10 = 7.000000000000001
_CEIL_EPS = 1e-9


def ceil_index(x: float) -> int:
    """``ceil(x)`` tolerant to float round-off just above an integer."""
    return int(math.ceil(x - _CEIL_EPS * max(1.0, abs(x))))


def as_seed(seed: int | None) -> int:
    """Return a 64-bit seed, drawing fresh entropy when ``seed`` is None."""
    if seed is None:
        seed = np.random.SeedSequence().entropy
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(seed))


def batch_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived deterministically from ``seed``.

    Stream ``j`` depends only on ``(seed, j)``, so per-batch work can run in
    any order or in parallel and still reproduce the sequential result.
    """
    return [make_rng(s) for s in np.random.SeedSequence(as_seed(seed)).spawn(n)]


@dataclass(frozen=True)
class ResidualBag:
    """Multiset of conformity residuals with provenance.

    ``batch_ids`` labels the batch each value came from and ``base_size`` the
    number of rows of the base each residual was scored against (``I - 1``
    for within-batch leave-one-out residuals).
    """

    values: NDArray[np.float64]
    batch_ids: NDArray[np.int64] = field(default=None)  # type: ignore[assignment]
    base_size: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", vals)
        ids = self.batch_ids
        ids = np.zeros(vals.size, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != vals.shape:
            raise ValueError("batch_ids must be parallel to values")
        object.__setattr__(self, "batch_ids", ids)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResidualBag):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and np.array_equal(self.batch_ids, other.batch_ids)
            and self.base_size == other.base_size
        )

    @classmethod
    def pooled(cls, bags: Sequence["ResidualBag"]) -> "ResidualBag":
        """Concatenate bags in order, relabelling batch ids ``0..J-1``."""
        vals = np.concatenate([b.values for b in bags]) if bags else np.empty(0)
        ids = np.concatenate([np.full(len(b), j, dtype=np.int64) for j, b in enumerate(bags)]) if bags else None
        sizes = {b.base_size for b in bags}
        return cls(vals, ids, sizes.pop() if len(sizes) == 1 else None)


def _bag(x) -> ResidualBag:
    return x if isinstance(x, ResidualBag) else ResidualBag(np.asarray(x, dtype=np.float64))


def _bags(batch_residuals: Iterable) -> list[ResidualBag]:
    bags = [_bag(b) for b in batch_residuals]
    if not bags or any(len(b) == 0 for b in bags):
        raise EmptyBag("every calibration batch must hold at least one residual")
    if len({len(b) for b in bags}) != 1:
        raise InconsistentBatchSizes(f"batch sizes differ: {sorted({len(b) for b in bags})}")
    return bags


@dataclass(frozen=True)
class CalibratedGate:
    """A residual threshold ``q``; a score is kept iff ``score <= q``."""

    q: float
    method: str
    alpha: float
    J: int = 1
    I: int = 0
    K: int = 0
    seed: int | None = None
    convention: str = CONVENTION
    bootstrap: str | None = None

    def __call__(self, score):
        return apply_gate(self, score)


def quantile(bag, level: float) -> float:
    """``ceil(level * m)``-th smallest value of the bag; ``level=1`` gives the max."""
    vals = _bag(bag).values
    m = vals.size
    if m == 0:
        raise EmptyBag("quantile of an empty bag")
    if not 0.0 < level <= 1.0:
        raise ValueError(f"level must lie in (0, 1], got {level}")
    k = min(max(ceil_index(level * m), 1), m)
    return float(np.partition(vals, k - 1)[k - 1])


def split_rank(n: int, alpha: float) -> int:
    """Order-statistic index ``ceil((1 - alpha)(n + 1))`` of split conformal."""
    return ceil_index((1.0 - alpha) * (n + 1))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def split_ucp(calib, alpha: float, bound: float = SCORE_BOUND) -> CalibratedGate:
    """Split conformal threshold from residuals scored against a fixed base.

    Takes the ``ceil((1 - alpha)(n + 1))``-th smallest residual, or ``bound``
    when that index exceeds ``n``.
    """
    _check_alpha(alpha)
    bag = _bag(calib)
    n = len(bag)
    if n == 0:
        raise EmptyBag("split calibration needs at least one residual")
    k = split_rank(n, alpha)
    q = bound if k > n else float(np.partition(bag.values, k - 1)[k - 1])
    return CalibratedGate(q=float(q), method="split", alpha=alpha, J=1, I=n)


def full_ucp_pvalue(pool, candidate_residual: float) -> float:
    """Full conformal p-value of a candidate among ``n`` pool residuals.

    The candidate counts itself, so the result lies in ``[1/(n+1), 1]``.
    """
    vals = _bag(pool).values
    return (int(np.count_nonzero(vals >= candidate_residual)) + 1) / (vals.size + 1)


def full_ucp(pool, alpha: float, candidates: ArrayLike | None = None, bound: float = SCORE_BOUND) -> CalibratedGate:
    """Largest candidate residual whose full conformal p-value is ``>= alpha``.

    Candidates default to the distinct pool values plus ``bound``. The
    p-value is non-increasing in the candidate, so the accepted candidates
    form the sub-level set ``{r <= q}``.
    """
    _check_alpha(alpha)
    bag = _bag(pool)
    if len(bag) == 0:
        raise EmptyBag("full conformal needs at least one pool residual")
    cand = np.unique(np.append(bag.values, bound)) if candidates is None else np.sort(np.asarray(candidates, float))
    srt = np.sort(bag.values)
    n_ge = srt.size - np.searchsorted(srt, cand, side="left")
    ok = (n_ge + 1) / (srt.size + 1) >= alpha
    q = float(cand[ok].max()) if ok.any() else float(srt[0])
    return CalibratedGate(q=q, method="full", alpha=alpha, J=1, I=len(bag))


def batch_level(J: int, alpha: float) -> float | None:
    """Adjusted quantile level ``1 - delta_J / J``, or None when ``delta_J < 0``.

    ``delta_J == 0`` (up to round-off) yields level 1, i.e. the maximum.
    """
    delta = (J + 1) * alpha - 1.0
    if delta < -1e-12:
        return None
    return min(1.0, 1.0 - max(delta, 0.0) / J)


def bucp(batch_residuals, alpha: float, bound: float = SCORE_BOUND) -> CalibratedGate:
    """Batch conformal threshold from ``J`` equal-size residual bags."""
    _check_alpha(alpha)
    bags = _bags(batch_residuals)
    J, I = len(bags), len(bags[0])
    level = batch_level(J, alpha)
    q = bound if level is None else quantile(ResidualBag.pooled(bags), level)
    return CalibratedGate(q=float(q), method="bucp", alpha=alpha, J=J, I=I)


def bootstrap_batch(bag, K: int, rng: np.random.Generator | int) -> ResidualBag:
    """``K`` values drawn uniformly with replacement from ``bag``."""
    if K < 1:
        raise ValueError("K must be >= 1; use bucp for K = 0")
    b = _bag(bag)
    if len(b) == 0:
        raise EmptyBag("cannot bootstrap an empty bag")
    gen = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    idx = gen.integers(0, len(b), size=K)
    return ResidualBag(b.values[idx], b.batch_ids[idx], b.base_size)


def bootstrap_split_quantiles(values: ArrayLike, alphas: Sequence[float], K: int,
                              rng: np.random.Generator, bound: float = SCORE_BOUND) -> NDArray[np.float64]:
    """Mean over ``K`` bootstrap resamples of the split conformal quantile.

    Each resample has the size of ``values``; one set of resamples serves
    every ``alpha``. Returns one aggregated threshold per alpha.
    """
    vals = np.asarray(values, dtype=np.float64)
    n = vals.size
    srt = np.sort(vals[rng.integers(0, n, size=(K, n))], axis=1)
    out = np.empty(len(alphas))
    for a, alpha in enumerate(alphas):
        k = split_rank(n, alpha)
        out[a] = bound if k > n else srt[:, k - 1].mean()
    return out


def bbucp(batch_residuals, alpha: float, K: int = DEFAULT_K, seed: int | None = None,
          bootstrap: str = "value", bound: float = SCORE_BOUND) -> CalibratedGate:
    """Batch bootstrap conformal threshold.

    With ``bootstrap="value"`` (default) every batch is resampled into ``K``
    single values, the ``J * K`` replicates are pooled in batch order and
    thresholded exactly as in :func:`bucp`.

    ``bootstrap="quantile"`` instead averages, per batch, the split conformal
    quantile of ``K`` bootstrap resamples and then averages across batches.
    It is a smoothing heuristic without a finite-sample guarantee.
    """
    _check_alpha(alpha)
    bags = _bags(batch_residuals)
    J, I = len(bags), len(bags[0])
    seed = as_seed(seed)
    rngs = batch_rngs(seed, J)
    if bootstrap == "value":
        level = batch_level(J, alpha)
        reps = [bootstrap_batch(b, K, g) for b, g in zip(bags, rngs)]
        q = bound if level is None else quantile(ResidualBag.pooled(reps), level)
    elif bootstrap == "quantile":
        if K < 1:
            raise ValueError("K must be >= 1")
        q = float(np.mean([bootstrap_split_quantiles(b.values, [alpha], K, g, bound)[0]
                           for b, g in zip(bags, rngs)]))
    else:
        raise ValueError(f"unknown bootstrap mode {bootstrap!r}")
    return CalibratedGate(q=float(q), method="bbucp", alpha=alpha, J=J, I=I, K=K, seed=seed, bootstrap=bootstrap)


def calibrate(method: str, batch_residuals, alpha: float, K: int = DEFAULT_K, seed: int | None = None,
              bootstrap: str = "value") -> CalibratedGate:
    """Dispatch on ``method``.

    ``split`` and ``full`` treat the pooled residuals as one exchangeable
    calibration set; ``bucp`` and ``bbucp`` use the batch structure.
    """
    if method == "bucp":
        return bucp(batch_residuals, alpha)
    if method == "bbucp":
        return bbucp(batch_residuals, alpha, K=K, seed=seed, bootstrap=bootstrap)
    bags = _bags(batch_residuals)
    pooled = ResidualBag.pooled(bags)
    if method == "split":
        g = split_ucp(pooled, alpha)
    elif method == "full":
        g = full_ucp(pooled, alpha)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return replace(g, J=len(bags), I=len(bags[0]))


def apply_gate(gate: CalibratedGate, score):
    """Keep decision ``score <= gate.q`` (closed sub-level set).

    Works elementwise on arrays; returns a plain bool for scalars.
    """
    out = np.asarray(score, dtype=np.float64) <= gate.q
    return bool(out) if out.ndim == 0 else out
