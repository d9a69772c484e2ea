"""Conformal alignment of a single strictness knob.

Each batch carries a cheap consensus score ``Q`` per response (rescaled
interaction energy, so ``Q`` is in ``[0, 1]``) and, during calibration only,
an expensive severity ``s`` in ``[0, 1]`` (larger is worse). At strictness
``tau`` a batch keeps ``{i: Q_i > tau}`` and drops the rest.

A batch predicate ``P(tau)`` states what the kept set must achieve. For each
calibration batch we record the minimal passing strictness ``S_j`` and set
``tau_hat`` to the ``ceil((1 - alpha)(J + 1))``-th smallest ``S_j``. If every
``P_j`` is non-decreasing in ``tau``, a new exchangeable batch then satisfies
``P(tau_hat)`` with probability at least ``1 - alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .conformal import ceil_index
from .errors import DimensionMismatch, EmptyInput

PREDICATE_KINDS = ("cvar_gap", "median_gap", "thresholded")
DEFAULT_TAIL_Q = 0.9


def rescale_energy(energy: ArrayLike, n: int) -> NDArray[np.float64]:
    """Affine map of unit-norm energies from ``[1, sqrt(n)]`` onto ``[0, 1]``."""
    if n < 2:
        raise ValueError("rescaling needs a batch of at least 2 responses")
    e = np.asarray(energy, dtype=np.float64)
    return np.clip((e - 1.0) / (np.sqrt(n) - 1.0), 0.0, 1.0)


@dataclass(frozen=True)
class BatchRecord:
    q_scores: NDArray[np.float64]
    severities: NDArray[np.float64] | None = None

    def __post_init__(self):
        q = np.asarray(self.q_scores, dtype=np.float64).ravel()
        if q.size < 1:
            raise EmptyInput("a batch record needs at least one score")
        object.__setattr__(self, "q_scores", q)
        if self.severities is not None:
            s = np.asarray(self.severities, dtype=np.float64).ravel()
            if s.shape != q.shape:
                raise DimensionMismatch(f"{q.size} scores but {s.size} severities")
            object.__setattr__(self, "severities", s)

    def without_severities(self) -> "BatchRecord":
        return BatchRecord(self.q_scores)


def kept_set(rec: BatchRecord, tau: float) -> NDArray[np.int64]:
    """Indices with ``Q > tau`` (strict)."""
    return np.flatnonzero(rec.q_scores > tau)


def dropped_set(rec: BatchRecord, tau: float) -> NDArray[np.int64]:
    return np.flatnonzero(rec.q_scores <= tau)


def cvar(values: ArrayLike, tail_q: float) -> float:
    """Empirical upper-tail CVaR: mean of the ``ceil((1 - tail_q) m)`` largest values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    m = v.size
    if m == 0:
        raise EmptyInput("CVaR of an empty set")
    h = min(ceil_index((1.0 - tail_q) * m), m)
    if h <= 0:
        return float(v.max())
    top = np.sort(v)[::-1][:h]
    return float(top.mean())


def _severities(rec: BatchRecord) -> NDArray[np.float64]:
    if rec.severities is None:
        raise EmptyInput("predicate needs severities; this record is score-only")
    return rec.severities


def cvar_gap(rec: BatchRecord, tau: float, tail_q: float = DEFAULT_TAIL_Q) -> float:
    """``CVaR(dropped) - CVaR(kept)``; NaN when either set is empty."""
    s = _severities(rec)
    keep = rec.q_scores > tau
    if keep.all() or not keep.any():
        return float("nan")
    return cvar(s[~keep], tail_q) - cvar(s[keep], tail_q)


def median_reduction(rec: BatchRecord, tau: float) -> float:
    """``median(all) - median(kept)``; NaN when nothing is kept."""
    s = _severities(rec)
    keep = rec.q_scores > tau
    if not keep.any():
        return float("nan")
    return float(np.median(s) - np.median(s[keep]))


def excluded_minus_kept(rec: BatchRecord, keep: ArrayLike) -> float:
    """``median(excluded) - median(kept)`` for a boolean keep mask.

    A gate that excludes nothing has no lift (0); with nothing kept the gap
    is undefined (NaN).
    """
    s = _severities(rec)
    keep = np.asarray(keep, dtype=bool)
    if not keep.any():
        return float("nan")
    if keep.all():
        return 0.0
    return float(np.median(s[~keep]) - np.median(s[keep]))


def cvar_gap_predicate(rec: BatchRecord, tau: float, tail_q: float = DEFAULT_TAIL_Q, delta: float = 0.0) -> bool:
    """True iff the CVaR gap is at least ``delta``; false if either set is empty."""
    gap = cvar_gap(rec, tau, tail_q)
    return bool(gap >= delta)  # NaN compares false


def median_gap_predicate(rec: BatchRecord, tau: float, delta: float = 0.0) -> bool:
    """True iff ``median(all) - median(kept) >= delta``; false if nothing is kept."""
    return bool(median_reduction(rec, tau) >= delta)


def threshold_predicate(curve: Callable[[float], float], r: float) -> Callable[[float], bool]:
    """Turn a real-valued curve into the indicator ``curve(tau) >= r``.

    A non-decreasing, right-continuous curve yields a predicate with the same
    properties.
    """
    return lambda tau: bool(curve(tau) >= r)


@dataclass(frozen=True)
class Predicate:
    """Serializable description of a batch predicate.

    ``thresholded`` applies ``r`` to the CVaR gap clipped to ``[0, 1]``.
    """

    kind: str = "cvar_gap"
    tail_q: float = DEFAULT_TAIL_Q
    delta: float = 0.0
    r: float | None = None

    def __post_init__(self):
        if self.kind not in PREDICATE_KINDS:
            raise ValueError(f"unknown predicate kind {self.kind!r}; expected one of {PREDICATE_KINDS}")
        if self.kind == "thresholded" and self.r is None:
            raise ValueError("thresholded predicate needs r")

    def __call__(self, rec: BatchRecord, tau: float) -> bool:
        if self.kind == "cvar_gap":
            return cvar_gap_predicate(rec, tau, self.tail_q, self.delta)
        if self.kind == "median_gap":
            return median_gap_predicate(rec, tau, self.delta)

        def curve(t):
            g = cvar_gap(rec, t, self.tail_q)
            return float(np.clip(g, 0.0, 1.0)) if g == g else 0.0

        return threshold_predicate(curve, self.r)(tau)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tail_q": self.tail_q, "delta": self.delta, "r": self.r}


@dataclass(frozen=True)
class StrictnessProfile:
    grid: NDArray[np.float64]
    passed: NDArray[np.bool_]
    S: float
    monotone_violations: int
    #: flips that happen while the kept set is still nonempty
    interior_violations: int = 0


def strictness_grid(rec: BatchRecord) -> NDArray[np.float64]:
    """``{0} | unique(Q) | {1}``, sorted."""
    return np.unique(np.concatenate([[0.0, 1.0], np.clip(rec.q_scores, 0.0, 1.0)]))


def minimal_strictness(rec: BatchRecord, predicate: Callable[[BatchRecord, float], bool],
                       grid: ArrayLike | None = None) -> StrictnessProfile:
    """First grid point where the predicate holds (1 if none does).

    ``monotone_violations`` counts adjacent grid points where the predicate
    flips from true to false as ``tau`` grows. Gap predicates are false once
    the kept set is empty, so a passing batch always flips at least once;
    ``interior_violations`` counts only the flips before that point.
    """
    g = strictness_grid(rec) if grid is None else np.unique(np.asarray(grid, dtype=np.float64))
    ok = np.fromiter((predicate(rec, float(t)) for t in g), dtype=bool, count=g.size)
    hits = np.flatnonzero(ok)
    S = float(g[hits[0]]) if hits.size else 1.0
    flips = ok[:-1] & ~ok[1:]
    interior = flips & (g[1:] < rec.q_scores.max())
    return StrictnessProfile(grid=g, passed=ok, S=S, monotone_violations=int(np.count_nonzero(flips)),
                             interior_violations=int(np.count_nonzero(interior)))


@dataclass(frozen=True)
class AlignmentGate:
    tau_hat: float
    alpha: float
    J: int
    K_index: int
    predicate: Predicate = field(default_factory=Predicate)
    seed: int | None = None


def alignment_rank(J: int, alpha: float) -> int:
    return ceil_index((1.0 - alpha) * (J + 1))


def calibrate_tau(S_values: ArrayLike, alpha: float, predicate: Predicate | None = None) -> AlignmentGate:
    """``tau_hat`` = ``K``-th smallest ``S_j``, ``K = ceil((1 - alpha)(J + 1))``; 1 if ``K > J``."""
    S = np.asarray(S_values, dtype=np.float64).ravel()
    if S.size == 0:
        raise EmptyInput("calibrate_tau needs at least one strictness value")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    J = S.size
    K = alignment_rank(J, alpha)
    tau = 1.0 if K >= J + 1 else float(np.sort(S)[K - 1])
    return AlignmentGate(tau_hat=tau, alpha=alpha, J=J, K_index=K, predicate=predicate or Predicate())


def align(records, alpha: float, predicate: Predicate | None = None) -> tuple[AlignmentGate, list[StrictnessProfile]]:
    """Profiles for every calibration record and the resulting gate."""
    predicate = predicate or Predicate()
    profiles = [minimal_strictness(r, predicate) for r in records]
    return calibrate_tau([p.S for p in profiles], alpha, predicate), profiles


@dataclass(frozen=True)
class Deployment:
    kept: NDArray[np.int64]
    dropped: NDArray[np.int64]
    delta_cvar: float | None = None
    delta_fs: float | None = None
    median_reduction: float | None = None
    passed: bool | None = None


def deploy(gate: AlignmentGate, rec: BatchRecord) -> Deployment:
    """Apply ``tau_hat`` using scores only; report gaps if severities are present.

    ``delta_fs`` is ``median(excluded) - median(kept)``.
    """
    keep = rec.q_scores > gate.tau_hat
    kept, dropped = np.flatnonzero(keep), np.flatnonzero(~keep)
    if rec.severities is None:
        return Deployment(kept, dropped)
    p = gate.predicate
    return Deployment(
        kept,
        dropped,
        delta_cvar=cvar_gap(rec, gate.tau_hat, p.tail_q),
        delta_fs=excluded_minus_kept(rec, keep),
        median_reduction=median_reduction(rec, gate.tau_hat),
        passed=p(rec, gate.tau_hat),
    )
