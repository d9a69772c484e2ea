"""Command-line entry point: ``confgate <command> [options]``.

Commands
--------
score      per-response energy, atypical score, rescaled ``Q`` and LOO residual
calibrate  fit a residual gate (split, full, bucp or bbucp) on a JSONL dataset
gate       apply a gate file to a JSONL dataset and list kept/dropped responses
align      fit a strictness gate from severities; also writes per-batch ``S_j``
simulate   run a synthetic experiment (1, 2 or 3) and write a report CSV
report     summarize a report CSV as coverage and severity-gap tables

Failures print a JSON object ``{"error": ..., "message": ...}`` on stderr and
exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import PREDICATE_KINDS, AlignmentGate, Predicate, align, rescale_energy
from .conformal import DEFAULT_K, METHODS, apply_gate, calibrate
from .errors import ConfgateError, InvalidConfig
from .geometry import batch_scores, loo_residuals
from .harness import ALPHAS, PRESETS, preset, simulate
from .io import RunConfig, gate_to_dict, load_gate, load_jsonl, read_reports, save_gate, write_reports, write_table

SEED_ENV = "CONFGATE_SEED"
EXIT_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(f"{self.prog}: {message}")


def _alphas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or not all(0.0 < a < 1.0 for a in vals):
        raise argparse.ArgumentTypeError("every alpha must lie in (0, 1)")
    return vals


def resolve_seed(flag: int | None, default: int | None = 0) -> int | None:
    """Explicit ``--seed`` wins, then ``CONFGATE_SEED``, then ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV}={env!r} is not an integer") from None
    return default


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _paths(args, *names) -> dict[str, str]:
    return {n: str(getattr(args, n)) for n in names if getattr(args, n, None)}


# --------------------------------------------------------------------------
# commands


def cmd_score(args) -> int:
    ds = load_jsonl(args.input, normalize=not args.no_normalize)
    rows = []
    for b in ds:
        e, phi = batch_scores(b.embeddings)
        q = rescale_energy(e, len(b)) if len(b) > 1 else np.full(len(b), np.nan)
        res = loo_residuals(b.embeddings) if len(b) > 1 else np.full(len(b), np.nan)
        for i, rid in enumerate(b.response_ids):
            rows.append({"query_id": b.query_id, "response_id": rid, "energy": e[i], "atypical": phi[i],
                         "q_score": q[i], "loo_residual": res[i]})
    cfg = RunConfig(command="score", paths=_paths(args, "input", "output"),
                    extra={"normalize": not args.no_normalize})
    cols = ("query_id", "response_id", "energy", "atypical", "q_score", "loo_residual")
    _emit(write_table(rows, cols, config=cfg), args.output)
    return 0


def cmd_calibrate(args) -> int:
    ds = load_jsonl(args.input, normalize=not args.no_normalize)
    seed = resolve_seed(args.seed)
    gate = calibrate(args.method, ds.residual_bags(), args.alpha, K=args.bootstrap_k, seed=seed,
                     bootstrap=args.bootstrap)
    cfg = RunConfig(command="calibrate", method=args.method, alpha=args.alpha, K=args.bootstrap_k, seed=seed,
                    paths=_paths(args, "input", "output"), extra={"bootstrap": args.bootstrap})
    if args.output:
        save_gate(gate, args.output, cfg)
    else:
        sys.stdout.write(json.dumps(gate_to_dict(gate, cfg), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gate(args) -> int:
    gate = load_gate(args.gate)
    ds = load_jsonl(args.input, normalize=not args.no_normalize)
    rows = []
    for b in ds:
        if isinstance(gate, AlignmentGate):
            score = rescale_energy(b.energies(), len(b))
            keep = score > gate.tau_hat
        else:
            score = loo_residuals(b.embeddings)
            keep = apply_gate(gate, score)
        for i, rid in enumerate(b.response_ids):
            rows.append({"query_id": b.query_id, "response_id": rid, "score": score[i],
                         "decision": "kept" if keep[i] else "dropped"})
    cfg = RunConfig(command="gate", method=getattr(gate, "method", "align"), alpha=gate.alpha,
                    seed=gate.seed, paths=_paths(args, "gate", "input", "output"))
    _emit(write_table(rows, ("query_id", "response_id", "score", "decision"), config=cfg), args.output)
    return 0


def cmd_align(args) -> int:
    ds = load_jsonl(args.input, normalize=not args.no_normalize)
    if not ds.has_severities:
        raise InvalidConfig("align needs a severity on every response")
    pred = Predicate(args.predicate, tail_q=args.tail_q, delta=args.delta, r=args.r)
    seed = resolve_seed(args.seed, default=None)
    gate, profiles = align([b.record() for b in ds], args.alpha, pred)
    gate = replace(gate, seed=seed)
    cfg = RunConfig(command="align", method="align", alpha=args.alpha, K=gate.K_index, tail_q=args.tail_q,
                    delta=args.delta, seed=seed, paths=_paths(args, "input", "output", "strictness_output"),
                    extra={"predicate": pred.to_dict()})
    save_gate(gate, args.output, cfg)
    s_path = args.strictness_output or str(Path(args.output).with_suffix("")) + ".strictness.csv"
    rows = [{"query_id": b.query_id, "S": p.S, "monotone_violations": p.monotone_violations,
             "interior_violations": p.interior_violations} for b, p in zip(ds, profiles)]
    write_table(rows, ("query_id", "S", "monotone_violations", "interior_violations"), s_path, cfg)
    bad = sum(p.monotone_violations > 0 for p in profiles)
    interior = sum(p.interior_violations > 0 for p in profiles)
    if bad:
        sys.stderr.write(json.dumps({"warning": "non_monotone_predicate", "batches": bad,
                                     "interior_batches": interior,
                                     "message": f"{bad} of {len(profiles)} batches flip from pass to fail "
                                                f"as strictness grows ({interior} before the kept set "
                                                "empties)"}) + "\n")
    return 0


_GEN_FLAGS = (("J", int), ("I", int), ("d", int), ("n_clusters", int), ("noise_frac", float),
              ("severity_noise", float), ("severity_weight", float), ("spread", float), ("tail_df", float))


def cmd_simulate(args) -> int:
    seed = resolve_seed(args.seed)
    overrides = {k: getattr(args, k) for k, _ in _GEN_FLAGS if getattr(args, k) is not None}
    cfg = preset(args.preset, seed=seed, **overrides)
    preds = [Predicate(k, tail_q=args.tail_q, delta=args.delta) for k in args.predicates]
    methods = tuple(args.methods)
    reports = simulate(cfg, args.experiment, alphas=args.alpha, n_trials=args.trials, K=args.bootstrap_k,
                       n_splits=args.splits, methods=methods, predicates=preds)
    run = RunConfig(command="simulate", method=",".join(methods) if args.experiment == 2 else None,
                    alpha=None, K=args.bootstrap_k, tail_q=args.tail_q, delta=args.delta, seed=seed,
                    paths=_paths(args, "output"),
                    extra={"experiment": args.experiment, "preset": args.preset, "alphas": list(args.alpha),
                           "trials": args.trials, "splits": args.splits, "generator": cfg.to_dict(),
                           "predicates": [p.to_dict() for p in preds]})
    _emit(write_reports(reports, config=run), args.output)
    return 0


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


def summarize(rows: list[dict]) -> str:
    """Plain-text tables: one line per (method, alpha) for the headline metrics."""
    cells: dict[tuple[str, float], dict[str, dict]] = {}
    for r in rows:
        cells.setdefault((r["method"], r["alpha"]), {})[r["metric"]] = r
    lines = ["coverage vs alpha",
             f"{'method':<18}{'alpha':>7}{'target':>8}{'rate':>9}{'se':>9}{'lower':>9}{'ok':>5}{'n':>7}"]
    for (method, alpha), m in cells.items():
        key = "coverage" if "coverage" in m else "pass_rate" if "pass_rate" in m else None
        if key is None:
            continue
        r = m[key]
        lower = 1.0 - alpha - 3.0 * r["se"]
        ok = "yes" if r["value"] >= lower else "no"
        lines.append(f"{method:<18}{alpha:>7.3f}{1 - alpha:>8.3f}{_fmt(r['value']):>9}{_fmt(r['se']):>9}"
                     f"{_fmt(lower):>9}{ok:>5}{r['n_trials']:>7}")
    lines += ["", "thresholds and severity gaps",
              f"{'method':<18}{'alpha':>7}{'threshold':>11}{'dfs_mean':>10}{'dfs_med':>10}{'dcvar':>10}"]
    for (method, alpha), m in cells.items():
        def v(name):
            return _fmt(m[name]["value"]) if name in m else "-"
        lines.append(f"{method:<18}{alpha:>7.3f}{v('mean_threshold'):>11}{v('delta_fs'):>10}"
                     f"{v('delta_fs_median'):>10}{v('delta_cvar'):>10}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    config, rows = read_reports(args.input)
    head = f"# config: {json.dumps(config, sort_keys=True)}\n" if config else ""
    _emit(head + summarize(rows), args.output)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="confgate", description="Gram-geometry conformal gating of LLM response batches.")
    p.add_argument("--version", action="version", version=f"confgate {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_input=True):
        sp.add_argument("--input", required=needs_input, help="JSONL response records")
        sp.add_argument("--output", help="output path (stdout when omitted)")
        sp.add_argument("--no-normalize", action="store_true", help="keep embeddings as given")

    sp = sub.add_parser("score", help="per-response scores")
    common(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("calibrate", help="fit a residual gate")
    common(sp)
    sp.add_argument("--method", choices=METHODS, default="bbucp")
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--bootstrap-k", type=int, default=DEFAULT_K)
    sp.add_argument("--bootstrap", choices=("value", "quantile"), default="value")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("gate", help="apply a gate file")
    common(sp)
    sp.add_argument("--gate", required=True, help="gate JSON from calibrate or align")
    sp.set_defaults(func=cmd_gate)

    sp = sub.add_parser("align", help="fit a strictness gate")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True, help="gate JSON path")
    sp.add_argument("--strictness-output", help="per-batch S CSV (default: next to the gate file)")
    sp.add_argument("--no-normalize", action="store_true")
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--predicate", choices=PREDICATE_KINDS, default="cvar_gap")
    sp.add_argument("--tail-q", type=float, default=0.9)
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--r", type=float, help="target level for the thresholded predicate")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("simulate", help="synthetic experiment")
    sp.add_argument("--experiment", type=int, choices=(1, 2, 3), default=2)
    sp.add_argument("--preset", choices=sorted(PRESETS), default="default")
    sp.add_argument("--alpha", type=_alphas, default=ALPHAS, help="comma-separated alphas")
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--splits", type=int, default=1, help="calibration/test splits per pool (experiment 1)")
    sp.add_argument("--bootstrap-k", type=int, default=DEFAULT_K)
    sp.add_argument("--methods", nargs="+", choices=("bucp", "bbucp"), default=["bucp", "bbucp"])
    sp.add_argument("--predicates", nargs="+", choices=PREDICATE_KINDS[:2], default=["cvar_gap"])
    sp.add_argument("--tail-q", type=float, default=0.9)
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")
    for name, typ in _GEN_FLAGS:
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="summarize a report CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfgateError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io_error", "message": str(exc)}) + "\n")
    except ValueError as exc:
        sys.stderr.write(json.dumps({"error": "invalid_value", "message": str(exc)}) + "\n")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
