"""Synthetic exchangeable batches and the three evaluation protocols.

``gen_batches`` draws each batch around ``n_clusters`` random directions with
a fixed number of uniformly random outlier rows; the severity of a response
is its atypical score plus Gaussian noise, clipped to ``[0, 1]``.

Protocols
---------
1. Single query: one pool, residuals against the rest of the pool, repeated
   calibration/test splits; split conformal versus bootstrap-aggregated
   quantiles.
2. Cross query: leave one batch out, calibrate B-UCP / BB-UCP on the rest,
   check coverage and the median severity gap on the held-out batch.
3. Alignment: leave one batch out, calibrate ``tau_hat`` on the rest, deploy
   on the held-out batch with scores only.

``simulate`` repeats a protocol on fresh datasets, holding out the last
batch, so that trials are independent and binomial standard errors apply.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .alignment import BatchRecord, Predicate, calibrate_tau, deploy, excluded_minus_kept, minimal_strictness
from .conformal import (
    DEFAULT_K,
    ResidualBag,
    as_seed,
    batch_rngs,
    bbucp,
    bootstrap_split_quantiles,
    bucp,
    make_rng,
    split_ucp,
)
from .dataset import Batch, BatchDataset
from .errors import InvalidConfig, TooFewBatches
from .geometry import batch_scores, loo_residuals

ALPHAS = (0.05, 0.10, 0.15, 0.20)


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic batch generator.

    ``spread`` scales the perturbation of cluster members around their
    direction (Student-t with ``tail_df`` degrees of freedom when set,
    Gaussian otherwise). ``severity_weight`` multiplies the atypical score in
    the severity model.
    """

    J: int = 49
    I: int = 20
    d: int = 32
    n_clusters: int = 1
    noise_frac: float = 0.1
    severity_noise: float = 0.1
    seed: int = 0
    spread: float = 0.1
    severity_weight: float = 1.0
    tail_df: float | None = None

    @property
    def n_outliers(self) -> int:
        return int(math.floor(self.noise_frac * self.I + 0.5))

    def validate(self) -> "GeneratorConfig":
        problems = []
        if self.J < 1:
            problems.append("J must be >= 1")
        if self.I < 2:
            problems.append("I must be >= 2")
        if self.d < 1:
            problems.append("d must be >= 1")
        if self.n_clusters < 1:
            problems.append("n_clusters must be >= 1")
        if not 0.0 <= self.noise_frac < 1.0:
            problems.append("noise_frac must lie in [0, 1)")
        elif self.n_outliers >= self.I:
            problems.append("noise_frac leaves no cluster rows")
        if self.severity_noise < 0 or self.spread < 0:
            problems.append("severity_noise and spread must be >= 0")
        if self.tail_df is not None and self.tail_df <= 0:
            problems.append("tail_df must be positive")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, GeneratorConfig] = {
    "default": GeneratorConfig(),
    # contaminated single-query pool: a quarter structured outliers
    "heavy_tail": GeneratorConfig(J=1, I=100, noise_frac=0.25, spread=0.3),
    "severity": GeneratorConfig(J=40, I=20, noise_frac=0.2, severity_noise=0.1, severity_weight=1.0),
    "small_pool": GeneratorConfig(J=40, I=6, n_clusters=1, noise_frac=0.0, spread=0.05),
}


def preset(name: str, **overrides) -> GeneratorConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides).validate()


def _unit_rows(X: NDArray[np.float64]) -> NDArray[np.float64]:
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _gen_batch(cfg: GeneratorConfig, j: int, rng: np.random.Generator) -> Batch:
    I, d = cfg.I, cfg.d
    n_out = cfg.n_outliers
    n_in = I - n_out
    dirs = _unit_rows(rng.standard_normal((cfg.n_clusters, d)))
    labels = rng.integers(0, cfg.n_clusters, size=n_in)
    if cfg.tail_df is None:
        z = rng.standard_normal((n_in, d))
    else:
        z = rng.standard_t(cfg.tail_df, size=(n_in, d))
    members = dirs[labels] + cfg.spread * z if cfg.spread > 0 else dirs[labels]
    outliers = rng.standard_normal((n_out, d))
    X = _unit_rows(np.vstack([members, outliers]))
    flags = np.r_[np.zeros(n_in, bool), np.ones(n_out, bool)]
    perm = rng.permutation(I)
    X, flags = X[perm], flags[perm]
    atyp = batch_scores(X)[1]
    noise = rng.standard_normal(I)
    sev = np.clip(cfg.severity_weight * atyp + cfg.severity_noise * noise, 0.0, 1.0)
    qid = f"q{j:04d}"
    return Batch(qid, X, [f"{qid}:{i}" for i in range(I)], severities=sev, is_outlier=flags)


def gen_batches(cfg: GeneratorConfig) -> BatchDataset:
    """``cfg.J`` i.i.d. batches of ``cfg.I`` unit-norm responses.

    Batch ``j`` is drawn from its own stream derived from ``cfg.seed``, so the
    dataset is reproducible and independent of generation order.
    """
    cfg.validate()
    return BatchDataset([_gen_batch(cfg, j, g) for j, g in enumerate(batch_rngs(cfg.seed, cfg.J))])


def trial_seeds(seed: int, n: int) -> list[int]:
    """``n`` 64-bit seeds split deterministically from a master seed."""
    kids = np.random.SeedSequence(as_seed(seed)).spawn(n)
    return [int(k.generate_state(1, np.uint64)[0]) for k in kids]


# --------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class Metric:
    value: float
    se: float
    n: int


def proportion(events: Iterable[bool]) -> Metric:
    x = np.asarray(list(events), dtype=float)
    n = x.size
    if n == 0:
        return Metric(float("nan"), float("nan"), 0)
    p = float(x.mean())
    return Metric(p, math.sqrt(p * (1.0 - p) / n), n)


def mean_metric(values: Iterable[float]) -> Metric:
    """Mean and standard error over the finite values (NaNs mark undefined trials)."""
    x = np.asarray(list(values), dtype=float)
    x = x[np.isfinite(x)]
    n = x.size
    if n == 0:
        return Metric(float("nan"), float("nan"), 0)
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return Metric(float(x.mean()), se, n)


def median_metric(values: Iterable[float]) -> Metric:
    x = np.asarray(list(values), dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return Metric(float("nan"), float("nan"), 0)
    return Metric(float(np.median(x)), float("nan"), int(x.size))


@dataclass
class TrialReport:
    """Aggregated metrics for one ``(method, alpha)`` cell.

    Proportions (``coverage``, ``pass_rate``) carry the binomial standard
    error ``sqrt(p (1 - p) / n)``; means carry the sample standard error.
    """

    method: str
    alpha: float
    n_trials: int
    seed: int
    metrics: dict[str, Metric] = field(default_factory=dict)

    def _get(self, name: str) -> float:
        m = self.metrics.get(name)
        return m.value if m is not None else float("nan")

    @property
    def coverage(self) -> float:
        return self._get("coverage")

    @property
    def pass_rate(self) -> float:
        return self._get("pass_rate")

    @property
    def se(self) -> float:
        for name in ("coverage", "pass_rate"):
            if name in self.metrics:
                return self.metrics[name].se
        return float("nan")

    @property
    def mean_threshold(self) -> float:
        return self._get("mean_threshold")

    @property
    def delta_fs_median(self) -> float:
        return self._get("delta_fs_median")

    @property
    def delta_fs(self) -> float:
        return self._get("delta_fs")

    @property
    def delta_cvar(self) -> float:
        return self._get("delta_cvar")

    def rows(self) -> list[dict]:
        return [
            {"method": self.method, "alpha": self.alpha, "metric": k, "value": m.value,
             "se": m.se, "n_trials": m.n, "seed": self.seed}
            for k, m in self.metrics.items()
        ]


def _group(rows: list[dict]) -> dict[tuple[str, float], list[dict]]:
    out: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        out.setdefault((r["method"], r["alpha"]), []).append(r)
    return out


# --------------------------------------------------------------------------
# experiment 1: single query


@dataclass
class Experiment1Result:
    """Per-trial arrays of shape ``(n_reps, n_splits, n_alphas)``."""

    alphas: tuple[float, ...]
    split_q: NDArray[np.float64]
    bb_q: NDArray[np.float64]
    split_covered: NDArray[np.bool_]
    bb_covered: NDArray[np.bool_]
    split_batch_cov: NDArray[np.float64]
    bb_batch_cov: NDArray[np.float64]
    seed: int

    def rep_mean_thresholds(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Mean threshold per rep over its splits, shape ``(n_reps, n_alphas)``."""
        return self.split_q.mean(axis=1), self.bb_q.mean(axis=1)


def experiment1_trials(cfg: GeneratorConfig, alphas: Sequence[float] = ALPHAS, n_reps: int = 500,
                       n_splits: int = 1, cal_frac: float = 0.5, K: int = DEFAULT_K) -> Experiment1Result:
    """Single-query protocol; each rep draws one pool of ``cfg.I`` responses.

    Residuals are scored against the rest of the pool and are therefore
    exchangeable. Every split sends ``cal_frac`` of them to calibration; the
    first test residual defines the coverage event and the test fraction
    below the threshold is kept as ``batch_cov``.
    """
    cfg.validate()
    n_cal = int(round(cal_frac * cfg.I))
    if not 1 <= n_cal < cfg.I:
        raise InvalidConfig(f"cal_frac={cal_frac} leaves an empty calibration or test split")
    alphas = tuple(float(a) for a in alphas)
    shape = (n_reps, n_splits, len(alphas))
    out = {k: np.empty(shape) for k in ("sq", "bq", "sb", "bb")}
    sc, bc = np.empty(shape, bool), np.empty(shape, bool)
    for r, ts in enumerate(trial_seeds(cfg.seed, n_reps)):
        data_seed, split_seed = trial_seeds(ts, 2)
        pool = gen_batches(replace(cfg, J=1, seed=data_seed))[0]
        R = loo_residuals(pool.embeddings)
        rng = make_rng(split_seed)
        for s in range(n_splits):
            perm = rng.permutation(cfg.I)
            cal, test = R[perm[:n_cal]], R[perm[n_cal:]]
            bq = bootstrap_split_quantiles(cal, alphas, K, rng)
            for a, alpha in enumerate(alphas):
                q = split_ucp(cal, alpha).q
                out["sq"][r, s, a], out["bq"][r, s, a] = q, bq[a]
                sc[r, s, a], bc[r, s, a] = test[0] <= q, test[0] <= bq[a]
                out["sb"][r, s, a], out["bb"][r, s, a] = np.mean(test <= q), np.mean(test <= bq[a])
    return Experiment1Result(alphas, out["sq"], out["bq"], sc, bc, out["sb"], out["bb"], cfg.seed)


def experiment1(cfg: GeneratorConfig, alphas: Sequence[float] = ALPHAS, n_reps: int = 500,
                n_splits: int = 1, cal_frac: float = 0.5, K: int = DEFAULT_K) -> list[TrialReport]:
    res = experiment1_trials(cfg, alphas, n_reps, n_splits, cal_frac, K)
    reports = []
    for a, alpha in enumerate(res.alphas):
        for method, q, cov, bcov in (("split", res.split_q, res.split_covered, res.split_batch_cov),
                                     ("bbucp", res.bb_q, res.bb_covered, res.bb_batch_cov)):
            metrics = {
                "coverage": proportion(cov[:, :, a].ravel()),
                "batch_coverage": mean_metric(bcov[:, :, a].ravel()),
                "mean_threshold": mean_metric(q[:, :, a].mean(axis=1)),
            }
            reports.append(TrialReport(method, alpha, cov[:, :, a].size, cfg.seed, metrics))
    return reports


# --------------------------------------------------------------------------
# experiment 2: cross-query batch calibration


def _require_batches(ds: BatchDataset, need_severities: bool) -> None:
    if len(ds) < 3:
        raise TooFewBatches(f"leave-one-query-out needs at least 3 batches, got {len(ds)}")
    if need_severities and not ds.has_severities:
        raise InvalidConfig("every batch needs severities for this protocol")


def _exp2_fold(cal: list[ResidualBag], test: Batch, alphas, K: int, seed: int, methods) -> list[dict]:
    test_res = loo_residuals(test.embeddings)
    rows = []
    for method in methods:
        for alpha in alphas:
            gate = bucp(cal, alpha) if method == "bucp" else bbucp(cal, alpha, K=K, seed=seed)
            keep = test_res <= gate.q
            dfs = excluded_minus_kept(BatchRecord(test_res, test.severities), keep) \
                if test.severities is not None else float("nan")
            rows.append({"method": method, "alpha": alpha, "covered": bool(keep[-1]),
                         "batch_cov": float(keep.mean()), "q": gate.q, "delta_fs": dfs})
    return rows


def _summarize_exp2(rows: list[dict], seed: int) -> list[TrialReport]:
    reports = []
    for (method, alpha), rs in _group(rows).items():
        metrics = {
            "coverage": proportion(r["covered"] for r in rs),
            "batch_coverage": mean_metric(r["batch_cov"] for r in rs),
            "mean_threshold": mean_metric(r["q"] for r in rs),
            "delta_fs": mean_metric(r["delta_fs"] for r in rs),
            "delta_fs_median": median_metric(r["delta_fs"] for r in rs),
        }
        reports.append(TrialReport(method, alpha, len(rs), seed, metrics))
    return reports


def experiment2_loqo(dataset: BatchDataset, alphas: Sequence[float] = ALPHAS, K: int = DEFAULT_K,
                     seed: int = 0, methods: Sequence[str] = ("bbucp",),
                     folds: Sequence[int] | None = None) -> list[TrialReport]:
    """Leave-one-query-out batch calibration.

    For each held-out batch the remaining batches calibrate a global
    threshold. Coverage is the event that the last held-out response's
    leave-one-out residual is below it; ``delta_fs`` is
    ``median(excluded) - median(kept)`` severity (0 when nothing is excluded,
    NaN when nothing is kept).
    """
    _require_batches(dataset, need_severities=False)
    bags = dataset.residual_bags()
    folds = range(len(dataset)) if folds is None else folds
    rows = []
    for f, fs in zip(folds, trial_seeds(seed, len(dataset))):
        cal = [b for i, b in enumerate(bags) if i != f]
        rows += _exp2_fold(cal, dataset[f], alphas, K, fs, methods)
    return _summarize_exp2(rows, seed)


# --------------------------------------------------------------------------
# experiment 3: conformal alignment


def default_predicates(tail_q: float = 0.9, delta: float = 0.0) -> tuple[Predicate, ...]:
    return (Predicate("cvar_gap", tail_q=tail_q, delta=delta),)


def _exp3_fold(cal_records, test_record, alphas, predicates) -> list[dict]:
    rows = []
    for pred in predicates:
        S = [minimal_strictness(r, pred).S for r in cal_records]
        test_profile = minimal_strictness(test_record, pred)
        for alpha in alphas:
            gate = calibrate_tau(S, alpha, pred)
            dep = deploy(gate, test_record)
            rows.append({
                "method": f"align_{pred.kind}", "alpha": alpha, "passed": bool(dep.passed),
                "s_covered": test_profile.S <= gate.tau_hat, "tau_hat": gate.tau_hat,
                "delta_cvar": dep.delta_cvar, "delta_fs": dep.delta_fs,
                "median_reduction": dep.median_reduction, "kept_frac": dep.kept.size / test_record.q_scores.size,
                "violations": test_profile.monotone_violations,
                "interior": test_profile.interior_violations,
            })
    return rows


def _summarize_exp3(rows: list[dict], seed: int) -> list[TrialReport]:
    reports = []
    for (method, alpha), rs in _group(rows).items():
        metrics = {
            "pass_rate": proportion(r["passed"] for r in rs),
            "s_coverage": proportion(r["s_covered"] for r in rs),
            "mean_threshold": mean_metric(r["tau_hat"] for r in rs),
            "delta_cvar": mean_metric(r["delta_cvar"] for r in rs),
            "delta_fs": mean_metric(r["delta_fs"] for r in rs),
            "delta_fs_median": median_metric(r["delta_fs"] for r in rs),
            "median_reduction": mean_metric(r["median_reduction"] for r in rs),
            "kept_frac": mean_metric(r["kept_frac"] for r in rs),
            "monotone_violations": mean_metric(r["violations"] for r in rs),
            "interior_violations": mean_metric(r["interior"] for r in rs),
        }
        reports.append(TrialReport(method, alpha, len(rs), seed, metrics))
    return reports


def experiment3_alignment(dataset: BatchDataset, alphas: Sequence[float] = ALPHAS, tail_q: float = 0.9,
                          delta: float = 0.0, predicates: Sequence[Predicate] | None = None,
                          folds: Sequence[int] | None = None, seed: int = 0) -> list[TrialReport]:
    """Leave-one-query-out conformal alignment.

    Severities of the held-out batch are used only to score the deployment;
    the kept set itself depends on its scores alone.
    """
    _require_batches(dataset, need_severities=True)
    predicates = tuple(predicates) if predicates else default_predicates(tail_q, delta)
    records = [b.record() for b in dataset]
    folds = range(len(dataset)) if folds is None else folds
    rows = []
    for f in folds:
        cal = [r for i, r in enumerate(records) if i != f]
        rows += _exp3_fold(cal, records[f], alphas, predicates)
    return _summarize_exp3(rows, seed)


# --------------------------------------------------------------------------
# Monte Carlo driver


def simulate(cfg: GeneratorConfig, experiment: int, alphas: Sequence[float] = ALPHAS, n_trials: int = 500,
             K: int = DEFAULT_K, n_splits: int = 1, cal_frac: float = 0.5, methods: Sequence[str] = ("bucp", "bbucp"),
             tail_q: float = 0.9, delta: float = 0.0,
             predicates: Sequence[Predicate] | None = None) -> list[TrialReport]:
    """Repeat a protocol on independent datasets.

    For experiments 2 and 3 each trial draws ``cfg.J + 1`` batches and holds
    out the last one, so ``cfg.J`` is the number of calibration batches.
    """
    cfg.validate()
    alphas = tuple(float(a) for a in alphas)
    if experiment == 1:
        return experiment1(cfg, alphas, n_trials, n_splits, cal_frac, K)
    if experiment not in (2, 3):
        raise InvalidConfig(f"experiment must be 1, 2 or 3, got {experiment}")
    if cfg.J < 2 and experiment == 2:
        raise TooFewBatches("need at least 2 calibration batches")
    predicates = tuple(predicates) if predicates else default_predicates(tail_q, delta)
    rows = []
    for ts in trial_seeds(cfg.seed, n_trials):
        data_seed, calib_seed = trial_seeds(ts, 2)
        ds = gen_batches(replace(cfg, J=cfg.J + 1, seed=data_seed))
        if experiment == 2:
            bags = ds.residual_bags()
            rows += _exp2_fold(bags[:-1], ds[-1], alphas, K, calib_seed, methods)
        else:
            recs = [b.record() for b in ds]
            rows += _exp3_fold(recs[:-1], recs[-1], alphas, predicates)
    return _summarize_exp2(rows, cfg.seed) if experiment == 2 else _summarize_exp3(rows, cfg.seed)
