"""End-to-end acceptance suite.

Runs ``configs/acceptance.json`` once (about five minutes on one core) and
checks every criterion against its tolerance, printing one PASS/FAIL line
per criterion.  Assertions read the measured values, not only the verdicts
recorded in ``summary.json``.
"""

import json
import math
from pathlib import Path

import pytest

from bbcalc.runner import main

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.json"


@pytest.fixture(scope="session")
def acceptance(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run"
    rc = main(["run", str(CONFIG), "--out", str(out), "--quiet"])
    summary = json.loads((out / "summary.json").read_text())
    return rc, out, summary


@pytest.fixture
def report(capsys):
    def emit(number, ok, **values):
        detail = "  ".join(f"{k}={_fmt(v)}" for k, v in values.items())
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _measured(summary, key):
    return summary["criteria"][key]["measured"]


def test_summary_lists_every_criterion(acceptance):
    rc, _, summary = acceptance
    assert sorted(summary["criteria"]) == [f"C{i}" for i in range(1, 10)]
    failed = [k for k, v in summary["criteria"].items() if v["status"] != "pass"]
    assert rc == (1 if failed else 0)


def test_criterion_1_geometry_identities(acceptance, report):
    m = _measured(acceptance[2], "C1")
    ok = m["points"] >= 1000 and m["max_residual"] <= 1e-6 and not m["failed"]
    report(1, ok, identities=m["identities"], points=m["points"], max_residual=m["max_residual"])
    assert ok


def test_criterion_2_order_lattice(acceptance, report):
    m = _measured(acceptance[2], "C2")
    ok = (m["inclusion_cases"] >= 50 and not m["inclusion_mismatches"]
          and m["order_fields"] >= 10 and m["max_order_deviation"] <= 0.1 and not m["order_misses"])
    for rule in ("literal_k_for_rho", "literal_split"):
        done, total = m["per_rule"][rule].split("/")
        ok = ok and done == total
    report(2, ok, cases=m["inclusion_cases"], mismatches=len(m["inclusion_mismatches"]),
           fields=m["order_fields"], max_order_deviation=m["max_order_deviation"])
    assert ok


def test_criterion_3_type_half_sandwich(acceptance, report):
    m = _measured(acceptance[2], "C3")
    ok = m["fields"] >= 5 and m["min_margin"] >= -0.1 and not m["violations"]
    report(3, ok, fields=m["fields"], slopes=m["slopes"], min_margin=m["min_margin"])
    assert ok


def test_criterion_4_quantization(acceptance, report):
    m = _measured(acceptance[2], "C4")
    ok = (m["identity_relative_error"] <= 1e-3 and m["identity_grid"] == "64x64"
          and len(m["composition_decay_factors"]) == 2
          and min(m["composition_decay_factors"]) >= 1.7 and m["adjoint_ratio"] <= 0.6)
    report(4, ok, identity_error=m["identity_relative_error"],
           decay_factors=m["composition_decay_factors"], adjoint_ratio=m["adjoint_ratio"])
    assert ok


def test_criterion_5_closed_forms(acceptance, report):
    m = _measured(acceptance[2], "C5")
    ok = (m["gaussian_moment_max_relative"] <= 1e-8
          and abs(m["finite_point_value"] / (2 * math.pi ** 2) - 1) <= 1e-6)
    report(5, ok, moment_rel=m["gaussian_moment_max_relative"], finite_point=m["finite_point_value"])
    assert ok


def test_criterion_6_decay_lemma(acceptance, report):
    m = _measured(acceptance[2], "C6")
    ok = m["assemblies"] > 0 and m["min_fraction_satisfied"] == 1.0 and not m["failing_rows"]
    report(6, ok, assemblies=m["assemblies"], rows=m["rows"], nodes=m["nodes"],
           min_fraction=m["min_fraction_satisfied"])
    assert ok


def test_criterion_7_symbol_structure(acceptance, report):
    m = _measured(acceptance[2], "C7")
    ok = (m["leading_min"] >= 0 and abs(m["leading_tau_exponent"] - 2) <= 0.3
          and m["subprincipal_max_relative"] <= 0.15 and abs(m["subprincipal_x_exponent"] - 1) <= 0.2
          and m["third_order_relative"] <= 0.2 and m["ellipticity_c"] > 0)
    report(7, ok, tau_exponent=m["leading_tau_exponent"], sub_rel=m["subprincipal_max_relative"],
           sub_x_exponent=m["subprincipal_x_exponent"], third_rel=m["third_order_relative"],
           ellipticity=m["ellipticity_c"])
    assert ok


def test_criterion_8_contraction_and_recovery(acceptance, report):
    m = _measured(acceptance[2], "C8")
    order = sorted(zip(m["c_values"], m["epsilon"]), reverse=True)
    eps_by_c = [e for _, e in order]
    decreasing = all(a > b for a, b in zip(eps_by_c, eps_by_c[1:]))
    ok = (sorted(m["c_values"]) == [0.025, 0.05, 0.1, 0.2] and decreasing
          and m["fitted_rate"] >= 0.4 and m["recovery_grid"] == "64x64" and m["recovery_c"] == 0.05
          and m["recovery_relative_error"] <= 0.05 and m["zero_truth_max_abs"] <= 1e-8)
    report(8, ok, epsilon=eps_by_c, rate=m["fitted_rate"], error=m["recovery_relative_error"],
           zero=m["zero_truth_max_abs"])
    assert ok


def test_criterion_9_determinism(acceptance, report, tmp_path):
    m = _measured(acceptance[2], "C9")
    in_run = not m["mismatched"] and len(m["files_compared"]) > 0
    # a separate pair of small recovery runs covers the numerical pipeline
    cfg = tmp_path / "rec.json"
    cfg.write_text(json.dumps({"suite": "recover", "seed": 11, "grid": {"n": 16, "sweep_n": 16},
                               "recover": {"max_iter": 50}, "sweep": {"c": [0.1, 0.05]}}))
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        main(["run", str(cfg), "--out", str(o), "--quiet"])
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".bbg1"))
    differ = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = in_run and names and not differ
    report(9, ok, suite_files=len(m["files_compared"]), recover_files=len(names), differing=differ)
    assert ok
