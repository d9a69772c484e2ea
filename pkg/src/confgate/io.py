"""Reading response records, persisting gates and writing tabular reports.

Input records are JSON lines with the exact fields ``query_id``,
``response_id``, ``embedding`` and the optional ``severity`` and ``text``.
Gates are stored as versioned JSON; reports are CSV files whose first line is
a ``# config:`` comment holding the run configuration.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .alignment import AlignmentGate, Predicate
from .conformal import CONVENTION, DEFAULT_K, CalibratedGate
from .dataset import Batch, BatchDataset
from .errors import DimensionMismatch, EmptyInput, ParseError, SeverityOutOfRange, VersionMismatch
from .geometry import unit_normalize

SCHEMA_VERSION = 1
REPORT_COLUMNS = ("method", "alpha", "metric", "value", "se", "n_trials", "seed")


@dataclass
class RunConfig:
    """Everything needed to reproduce an artifact; echoed into its header."""

    command: str = ""
    method: str | None = None
    alpha: float | None = None
    K: int = DEFAULT_K
    tail_q: float = 0.9
    delta: float = 0.0
    seed: int | None = None
    paths: dict[str, str] = field(default_factory=dict)
    convention: str = CONVENTION
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# JSONL records


def _parse_line(raw: str, lineno: int) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ParseError(lineno, "expected a JSON object")
    for key in ("query_id", "response_id", "embedding"):
        if key not in obj:
            raise ParseError(lineno, f"missing field {key!r}")
    emb = obj["embedding"]
    if not isinstance(emb, list) or not emb or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb):
        raise ParseError(lineno, "embedding must be a non-empty list of numbers")
    sev = obj.get("severity")
    if sev is not None and (isinstance(sev, bool) or not isinstance(sev, (int, float))):
        raise ParseError(lineno, "severity must be a number")
    return obj


def read_records(lines: Iterable[str]) -> list[dict]:
    """Parse JSON lines, skipping blank ones; line numbers are 1-based."""
    return [_parse_line(raw, n) for n, raw in enumerate(lines, start=1) if raw.strip()]


def records_to_dataset(records: list[dict], normalize: bool = True) -> BatchDataset:
    """Group records by ``query_id`` in order of first appearance."""
    if not records:
        raise EmptyInput("no response records found")
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(str(r["query_id"]), []).append(r)
    dim = None
    batches = []
    for qid, rows in groups.items():
        dims = {len(r["embedding"]) for r in rows}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise DimensionMismatch(f"query {qid!r}: embedding dimensions {sorted(dims)} disagree with the dataset")
        dim = dims.pop()
        for r in rows:
            s = r.get("severity")
            if s is not None and not 0.0 <= float(s) <= 1.0:
                raise SeverityOutOfRange(str(r["response_id"]), float(s))
        E = np.array([r["embedding"] for r in rows], dtype=np.float64)
        if normalize:
            E = unit_normalize(E)
        sev = [r.get("severity") for r in rows]
        has_sev = all(s is not None for s in sev)
        batches.append(Batch(
            query_id=qid,
            embeddings=E,
            response_ids=[str(r["response_id"]) for r in rows],
            severities=np.array(sev, dtype=np.float64) if has_sev else None,
            texts=[r.get("text") for r in rows],
        ))
    return BatchDataset(batches)


def load_jsonl(path, normalize: bool = True) -> BatchDataset:
    """Load a JSONL file of responses into a :class:`BatchDataset`.

    Parameters
    ----------
    path : str or Path
    normalize : bool
        Rescale every embedding to unit norm (default). With ``False`` the
        vectors are stored as given and scoring will reject non-unit rows.

    Raises
    ------
    ParseError
        On malformed lines (carries the 1-based line number).
    DimensionMismatch
        If embedding lengths disagree.
    SeverityOutOfRange
        If a severity lies outside ``[0, 1]``.
    """
    with open(path, encoding="utf-8") as fh:
        return records_to_dataset(read_records(fh), normalize=normalize)


def dump_jsonl(dataset: BatchDataset, path) -> None:
    """Write a dataset back out as JSON lines (embeddings as stored)."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in dataset:
            for i, rid in enumerate(b.response_ids):
                rec: dict[str, Any] = {"query_id": b.query_id, "response_id": rid,
                                       "embedding": b.embeddings[i].tolist()}
                if b.severities is not None:
                    rec["severity"] = float(b.severities[i])
                if b.texts is not None and b.texts[i] is not None:
                    rec["text"] = b.texts[i]
                fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# gate files


def gate_to_dict(gate: CalibratedGate | AlignmentGate, config: RunConfig | None = None) -> dict:
    if isinstance(gate, CalibratedGate):
        d = {"schema_version": SCHEMA_VERSION, "kind": "calibrated", "method": gate.method,
             "alpha": gate.alpha, "q": gate.q, "J": gate.J, "I": gate.I, "K": gate.K,
             "seed": gate.seed, "convention": gate.convention, "bootstrap": gate.bootstrap}
    elif isinstance(gate, AlignmentGate):
        d = {"schema_version": SCHEMA_VERSION, "kind": "alignment", "method": "align",
             "alpha": gate.alpha, "tau_hat": gate.tau_hat, "J": gate.J, "I": None,
             "K": gate.K_index, "seed": gate.seed, "convention": CONVENTION,
             "predicate": gate.predicate.to_dict()}
    else:
        raise TypeError(f"cannot serialize {type(gate).__name__}")
    if config is not None:
        d["config"] = config.to_dict()
    return d


def gate_from_dict(d: dict) -> CalibratedGate | AlignmentGate:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionMismatch(f"gate schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    if d.get("kind") == "alignment" or "tau_hat" in d:
        return AlignmentGate(tau_hat=float(d["tau_hat"]), alpha=float(d["alpha"]), J=int(d["J"]),
                             K_index=int(d["K"]), predicate=Predicate(**d.get("predicate", {})),
                             seed=d.get("seed"))
    return CalibratedGate(q=float(d["q"]), method=d["method"], alpha=float(d["alpha"]), J=int(d["J"]),
                          I=int(d["I"]), K=int(d["K"]), seed=d.get("seed"),
                          convention=d.get("convention", CONVENTION), bootstrap=d.get("bootstrap"))


def save_gate(gate: CalibratedGate | AlignmentGate, path, config: RunConfig | None = None) -> None:
    """Write a gate as JSON; floats are stored via ``repr`` so reloading is exact."""
    Path(path).write_text(json.dumps(gate_to_dict(gate, config), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_gate(path) -> CalibratedGate | AlignmentGate:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, f"gate file is not valid JSON ({exc.msg})") from None
    return gate_from_dict(d)


# --------------------------------------------------------------------------
# tabular output


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(rows: Iterable[dict], columns: Iterable[str], path=None,
                config: RunConfig | None = None) -> str:
    """CSV text with an optional ``# config:`` header line; also written to ``path``."""
    columns = list(columns)
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_table(path) -> tuple[dict | None, list[dict]]:
    """Inverse of :func:`write_table`; returns ``(config_dict, rows)`` with string cells."""
    text = Path(path).read_text(encoding="utf-8")
    config = None
    body = []
    for line in text.splitlines():
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
        elif not line.startswith("#"):
            body.append(line)
    return config, list(csv.DictReader(body))


def report_rows(reports) -> list[dict]:
    return [row for r in reports for row in r.rows()]


def write_reports(reports, path=None, config: RunConfig | None = None) -> str:
    return write_table(report_rows(reports), REPORT_COLUMNS, path, config)


def _num(s: str) -> float:
    return float(s) if s != "" else math.nan


def read_reports(path) -> tuple[dict | None, list[dict]]:
    """Load a report CSV with numeric columns converted."""
    config, rows = read_table(path)
    missing = set(REPORT_COLUMNS) - set(rows[0]) if rows else set()
    if missing:
        raise ParseError(2, f"report is missing columns {sorted(missing)}")
    out = []
    for r in rows:
        out.append({"method": r["method"], "alpha": _num(r["alpha"]), "metric": r["metric"],
                    "value": _num(r["value"]), "se": _num(r["se"]), "n_trials": int(r["n_trials"]),
                    "seed": int(r["seed"]) if r["seed"] else None})
    return config, out
