from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from confgate.alignment import AlignmentGate, rescale_energy
from confgate.cli import main
from confgate.geometry import batch_scores, loo_residuals
from confgate.harness import GeneratorConfig, gen_batches, preset
from confgate.io import load_gate, load_jsonl, read_reports, read_table, dump_jsonl, save_gate


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.jsonl"
    dump_jsonl(gen_batches(preset("severity", J=8, I=10, seed=4)), path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_score_matches_library(tmp_path, data, capsys):
    out = tmp_path / "s.csv"
    assert run(capsys, "score", "--input", data, "--output", out)[0] == 0
    _, rows = read_table(out)
    ds = load_jsonl(data)
    got = {r["response_id"]: r for r in rows}
    for b in ds:
        e, phi = batch_scores(b.embeddings)
        q, res = rescale_energy(e, len(b)), loo_residuals(b.embeddings)
        for i, rid in enumerate(b.response_ids):
            r = got[rid]
            assert float(r["energy"]) == e[i] and float(r["atypical"]) == phi[i]
            assert float(r["q_score"]) == q[i] and float(r["loo_residual"]) == res[i]


def test_calibrate_degenerate_batch_count(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    dump_jsonl(gen_batches(GeneratorConfig(J=3, I=5, seed=1)), path)
    out = tmp_path / "g.json"
    assert run(capsys, "calibrate", "--input", path, "--method", "bucp", "--alpha", 0.2, "--output", out)[0] == 0
    assert load_gate(out).q == 1.0


@pytest.mark.parametrize("method", ["split", "full", "bucp", "bbucp"])
def test_calibrate_then_gate_partitions(tmp_path, data, capsys, method):
    g, listing = tmp_path / "g.json", tmp_path / "k.csv"
    assert run(capsys, "calibrate", "--input", data, "--method", method, "--alpha", 0.1,
               "--bootstrap-k", 20, "--seed", 1, "--output", g)[0] == 0
    gate = load_gate(g)
    assert gate.method == method
    assert run(capsys, "gate", "--gate", g, "--input", data, "--output", listing)[0] == 0
    _, rows = read_table(listing)
    ds = load_jsonl(data)
    assert sorted(r["response_id"] for r in rows) == sorted(rid for b in ds for rid in b.response_ids)
    assert {r["decision"] for r in rows} <= {"kept", "dropped"}
    for r in rows:
        assert (r["decision"] == "kept") == (float(r["score"]) <= gate.q)


def test_gate_with_unit_tau_drops_everything(tmp_path, data, capsys):
    g = tmp_path / "a.json"
    save_gate(AlignmentGate(1.0, 0.05, 5, 6), g)
    code, out, _ = run(capsys, "gate", "--gate", g, "--input", data)
    assert code == 0
    rows = list(csv.DictReader(line for line in out.splitlines() if not line.startswith("#")))
    assert rows and all(r["decision"] == "dropped" for r in rows)


def test_align_writes_gate_and_strictness(tmp_path, data, capsys):
    g = tmp_path / "a.json"
    code, _, err = run(capsys, "align", "--input", data, "--alpha", 0.2, "--output", g)
    assert code == 0
    gate = load_gate(g)
    assert isinstance(gate, AlignmentGate) and gate.J == 8
    cfg, rows = read_table(tmp_path / "a.strictness.csv")
    assert len(rows) == 8 and cfg["command"] == "align"
    S = sorted(float(r["S"]) for r in rows)
    assert gate.tau_hat == S[gate.K_index - 1]
    if any(int(r["monotone_violations"]) for r in rows):
        assert json.loads(err.splitlines()[-1])["warning"] == "non_monotone_predicate"


def test_align_requires_severities(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"query_id": "q", "response_id": "r", "embedding": [1, 0]}) + "\n")
    code, _, err = run(capsys, "align", "--input", path, "--output", tmp_path / "a.json")
    assert code != 0 and json.loads(err)["error"] == "invalid_config"


def test_simulate_experiment1_defaults_cover(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run(capsys, "simulate", "--experiment", 1, "--output", out)[0] == 0
    _, rows = read_reports(out)
    cov = [r for r in rows if r["metric"] == "coverage"]
    assert cov
    for r in cov:
        assert r["value"] >= 1 - r["alpha"] - 3 * r["se"], r


def test_simulate_byte_identical(tmp_path, capsys):
    args = ["simulate", "--experiment", 3, "--preset", "severity", "--J", 6, "--trials", 4, "--seed", 9,
            "--predicates", "cvar_gap", "median_gap"]
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args)
    assert a and a == b


def test_seed_env_and_flag(tmp_path, capsys, monkeypatch):
    base = ["simulate", "--experiment", 2, "--J", 4, "--I", 5, "--trials", 2, "--bootstrap-k", 5]
    monkeypatch.setenv("CONFGATE_SEED", "77")
    _, out, _ = run(capsys, *base)
    assert json.loads(out.splitlines()[0][len("# config: "):])["seed"] == 77
    _, out, _ = run(capsys, *base, "--seed", 5)
    assert json.loads(out.splitlines()[0][len("# config: "):])["seed"] == 5


def test_report_tables(tmp_path, capsys):
    out = tmp_path / "r.csv"
    run(capsys, "simulate", "--experiment", 2, "--J", 5, "--I", 6, "--trials", 3, "--bootstrap-k", 5,
        "--output", out)
    code, text, _ = run(capsys, "report", "--input", out)
    assert code == 0
    assert "coverage vs alpha" in text and "thresholds and severity gaps" in text
    assert sum(line.startswith("bbucp") for line in text.splitlines()) == 8


@pytest.mark.parametrize("argv,code_name", [
    (["calibrate", "--input", "missing.jsonl"], "io_error"),
    (["calibrate", "--method", "nope", "--input", "x"], "invalid_config"),
    (["frobnicate"], "invalid_config"),
    (["simulate", "--alpha", "1.5"], "invalid_config"),
])
def test_errors_are_json(capsys, argv, code_name):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert json.loads(err)["error"] == code_name


def test_bad_record_error(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"query_id": "q", "response_id": "r", "embedding": [1, 0], "severity": 1.2}) + "\n")
    code, _, err = run(capsys, "score", "--input", path)
    assert code == 2 and json.loads(err)["error"] == "severity_out_of_range"


def test_no_normalize_rejects_raw_vectors(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    path.write_text("".join(json.dumps({"query_id": "q", "response_id": str(i), "embedding": [3, 4]}) + "\n"
                            for i in range(3)))
    code, _, err = run(capsys, "score", "--input", path, "--no-normalize")
    assert code == 2 and json.loads(err)["error"] == "not_normalized"
    assert run(capsys, "score", "--input", path)[0] == 0
