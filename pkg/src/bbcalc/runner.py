"""Experiment orchestration: configuration, verification suites, artifacts and the CLI.

``bbcalc run <config.json>`` validates the configuration against
:data:`CONFIG_SCHEMA`, runs the selected suite and writes CSV/BBG1 artifacts
plus ``summary.json`` into the output directory.  ``bbcalc plots <run_dir>``
turns a finished run into whitespace-separated ``.dat`` files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dynamics import ParaboloidChart, TestWeight, normal_operator_matrix
from .geometry import defining_functions, lift_identity_suite, random_cloud, write_identity_report, \
    write_points_csv
from .normalop import finite_point_symbol, gaussian_moment, symbol_structure_report, write_fit_csv, \
    write_probe_csv
from .quantize import GridSpec, adjoint_symbol, compose_symbols, quantize, weighted_norm
from .recover import BumpTruth, Operators, RecoveryProblem, assemble_normal_operators, \
    build_error_operator, contraction_epsilon, elliptic_combination, recover, synthetic_data, \
    write_bbg1
from .symbols import PROVED, UNKNOWN, SymbolField, SymbolOrder, estimate_order, includes, \
    parse_order, type_half_slopes

__all__ = [
    "CONFIG_SCHEMA",
    "CRITERIA",
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "validate_config",
    "run",
    "emit_plots",
    "main",
]

SUITES = ("geometry", "symbols", "quantize", "normalop", "recover", "all")

CRITERIA = {
    "C1": "geometry_lift_identities",
    "C2": "symbol_order_lattice",
    "C3": "hormander_sandwich",
    "C4": "quantization_oracle",
    "C5": "closed_form_anchors",
    "C6": "decay_lemma",
    "C7": "symbol_structure_verdicts",
    "C8": "contraction_and_recovery",
    "C9": "determinism",
}

_ORDER = {
    "type": "array",
    "minItems": 4,
    "maxItems": 4,
    "items": {"type": "string", "pattern": r"^-?[0-9]+(/[1-9][0-9]*)?$"},
}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}


def _block(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "bbcalc experiment",
    **_block({
        "suite": {"enum": list(SUITES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "output_dir": {"type": "string", "minLength": 1},
        "geometry": _block({
            "points": _POS_INT,
            "dimension": {"type": "integer", "minimum": 2, "maximum": 4},
            "x_range": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
            "step": _POS,
            "tolerance": _POS,
        }),
        "symbols": _block({
            "dimension": {"type": "integer", "minimum": 2, "maximum": 3},
            "inclusion_cases": {"type": "integer", "minimum": 3},
            "order_tolerance": _POS,
            "slope_tolerance": _POS,
            "inclusions": {"type": "array", "items": _block(
                {"from": _ORDER, "to": _ORDER, "expected": {"enum": [PROVED, UNKNOWN]}},
                required=("from", "to", "expected"))},
        }),
        "grid": _block({
            "n": {"type": "integer", "minimum": 8},
            "sweep_n": {"type": "integer", "minimum": 8},
            "composition_n": {"type": "integer", "minimum": 8},
        }),
        "normalop": _block({
            "c": _POS,
            "F": _POS,
            "kappa": _POS,
            "travel_time": _POS,
            "assembly_n": {"type": "integer", "minimum": 8},
        }),
        "recover": _block({
            "c": _POS,
            "F": _POS,
            "band": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "top_margin": {"type": "number", "minimum": 0},
            "max_iter": _POS_INT,
            "tol": _POS,
            "error_tol": _POS,
            "zero_tol": _POS,
            "rate_min": {"type": "number"},
        }),
        "sweep": _block({
            "c": {"type": "array", "items": _POS, "minItems": 2},
            "F": {"type": "array", "items": _POS, "minItems": 1},
            "refinement": {"type": "array", "items": {"type": "integer", "minimum": 8},
                           "minItems": 2},
        }),
        "determinism": _block({
            "suites": {"type": "array",
                       "items": {"enum": ["geometry", "symbols", "quantize", "normalop", "recover"]}},
        }),
    }, required=("suite",)),
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "bbcalc_run",
    "geometry": {"points": 1000, "dimension": 3, "x_range": [1e-3, 1.0], "step": 1e-5,
                 "tolerance": 1e-6},
    "symbols": {"dimension": 2, "inclusion_cases": 50, "order_tolerance": 0.1,
                "slope_tolerance": 0.1, "inclusions": []},
    "grid": {"n": 64, "sweep_n": 32, "composition_n": 32},
    "normalop": {"c": 0.1, "F": 1.0, "kappa": 0.25, "travel_time": 10.0, "assembly_n": 24},
    "recover": {"c": 0.05, "F": 1.0, "band": 0.4, "top_margin": 0.5, "max_iter": 200,
                "tol": 1e-8, "error_tol": 0.05, "zero_tol": 1e-8, "rate_min": 0.4},
    "sweep": {"c": [0.2, 0.1, 0.05, 0.025], "F": [1.0], "refinement": [16, 31]},
    "determinism": {"suites": ["geometry", "symbols"]},
}

SUITE_CRITERIA = {
    "geometry": ("C1",),
    "symbols": ("C2", "C3"),
    "quantize": ("C4",),
    "normalop": ("C5", "C6", "C7"),
    "recover": ("C6", "C8"),
}


class ConfigError(ValueError):
    """Configuration rejected; ``errors`` holds ``field.path: message`` strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate_config(raw: dict) -> dict:
    """Schema-check ``raw`` and fill defaults.  Raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: configuration must be a JSON object"])
    v = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errs:
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}" for e in errs)
    cfg = _merge(DEFAULTS, raw)
    lo, hi = cfg["geometry"]["x_range"]
    if not lo < hi:
        raise ConfigError(["geometry.x_range: lower end must be below the upper end"])
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<root>: not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return validate_config(raw)


# ---------------------------------------------------------------------------
# small helpers

def _r(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _verdict(passed: bool, **measured) -> dict:
    return {"status": "pass" if passed else "fail", "measured": measured}


def _plain(obj):
    """JSON-safe copy (numpy scalars, fractions, non-finite floats)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating, Fraction)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


# ---------------------------------------------------------------------------
# geometry

def suite_geometry(cfg: dict, out: Path, jobs: int = 1) -> dict:
    g = cfg["geometry"]
    pts = random_cloud(g["points"], g["dimension"], cfg["seed"], x_range=tuple(g["x_range"]))
    report = lift_identity_suite(step=g["step"], tol=g["tolerance"], points=pts)
    write_identity_report(report, out / "lift_identities.csv")
    write_points_csv(pts, out / "geometry_points.csv")
    worst = max(report, key=lambda r: r["max_residual"])
    failed = [r["identity_name"] for r in report if not r["passed"]]
    return {"C1": _verdict(not failed, identities=len(report), points=g["points"],
                           max_residual=worst["max_residual"], worst_identity=worst["identity_name"],
                           failed=failed, tolerance=g["tolerance"])}


# ---------------------------------------------------------------------------
# symbols

def _field(fn, claimed):
    return SymbolField(lambda x, y, xi, eta: fn(defining_functions(x, y, xi, eta), x, y),
                       SymbolOrder(*claimed))


# fields with a constructed order, for the order estimator
ORDER_FIELDS = {
    "rho_dsigma2": (lambda d, x, y: d.rho * d.d_sigma ** 2, (-1, 0, -2, 0)),
    "x": (lambda d, x, y: d.xval, (0, -1, 0, 0)),
    "tau1": (lambda d, x, y: d.tau[:, 0], (0, 0, -1, -1)),
    "rho": (lambda d, x, y: d.rho, (-1, 0, 0, 0)),
    "dgamma2": (lambda d, x, y: d.d_gamma ** 2, (0, 0, 0, -2)),
    "x_rho_dsigma_dgamma": (lambda d, x, y: d.xval * d.rho * d.d_sigma * d.d_gamma, (-1, -1, -1, -1)),
    "inv_dgamma": (lambda d, x, y: 1 / d.d_gamma, (0, 0, 0, 1)),
    "sqrt_rho_modulated": (lambda d, x, y: (2 + np.sin(y[:, 0])) * np.sqrt(d.rho), ("-1/2", 0, 0, 0)),
    "x_over_dgamma2": (lambda d, x, y: d.xval / d.d_gamma ** 2, (0, -1, 0, 2)),
    "rho_tilde_mixed": (lambda d, x, y: d.rho_tilde * (1 + d.tau_tilde[:, 0] ** 2), (-1, 0, 2, 0)),
}

# bb-fields of order (m, l, 0, 0) or better, for the type-1/2 estimate
HALF_FIELDS = {
    "tau_tilde1": (lambda d, x, y: d.tau_tilde[:, 0], 0, 0),
    "rho_tilde": (lambda d, x, y: d.rho_tilde, 0, 0),
    "x_over_dgamma2": (lambda d, x, y: d.xval / d.d_gamma ** 2, 0, 0),
    "dsigma_over_dgamma": (lambda d, x, y: d.d_sigma / d.d_gamma, 0, 0),
    "tau_tilde_sq_over_rho": (lambda d, x, y: (1 + x) * d.tau_tilde[:, 0] ** 2 / d.rho, 1, 0),
}

INCLUSION_RULES = ("monotone", "rho_for_k", "j_for_x", "j_for_k", "combined_split", "no_gain")


def inclusion_cases(count: int = 50, seed: int = 0):
    """Generated inclusion queries with known answers.

    The first three are the literal instances; the rest cycle through the
    four lattice rules plus genuine non-inclusions (one index lowered with
    nothing traded for it).
    """
    Fr = Fraction
    cases = [
        ("literal_k_for_rho", SymbolOrder(0, 0, 2, 0), SymbolOrder(1, 0, 0, 0), PROVED),
        ("literal_split", SymbolOrder(-1, -1, -1, -1), SymbolOrder(Fr(-1, 2), Fr(-1, 2), 0, 0), PROVED),
        ("x_as_dgamma_squared", SymbolOrder(0, -1, 0, 0), SymbolOrder(0, 0, 0, -2), PROVED),
    ]
    rng = np.random.default_rng(seed)
    i = 0
    while len(cases) < count:
        rule = INCLUSION_RULES[i % len(INCLUSION_RULES)]
        i += 1
        m, l, k, j = (Fr(int(v), 4) for v in rng.integers(-8, 9, 4))
        d = Fr(int(rng.integers(1, 9)), 4)
        o1 = SymbolOrder(m, l, k, j)
        if rule == "monotone":
            inc = [Fr(int(v), 4) for v in rng.integers(0, 5, 4)]
            o2, want = SymbolOrder(m + inc[0], l + inc[1], k + inc[2], j + inc[3]), PROVED
        elif rule == "rho_for_k":
            o2, want = SymbolOrder(m + d / 2, l, k - d, j), PROVED
        elif rule == "j_for_x":
            o2, want = SymbolOrder(m, l + d / 2, k, j - d), PROVED
        elif rule == "j_for_k":
            o2, want = SymbolOrder(m, l, k + d, j - d), PROVED
        elif rule == "combined_split":
            s = Fr(int(rng.integers(0, 9)), 8)
            o2, want = SymbolOrder(m + s * d / 2, l + (1 - s) * d / 2, k, j - d), PROVED
        else:
            low = [0, 0, 0, 0]
            low[int(rng.integers(0, 4))] = d
            o2, want = SymbolOrder(m - low[0], l - low[1], k - low[2], j - low[3]), UNKNOWN
        cases.append((rule, o1, o2, want))
    return cases


def suite_symbols(cfg: dict, out: Path, jobs: int = 1) -> dict:
    s = cfg["symbols"]
    n = s["dimension"]
    cases = inclusion_cases(s["inclusion_cases"], cfg["seed"])
    cases += [("configured", parse_order(q["from"]), parse_order(q["to"]), q["expected"])
              for q in s["inclusions"]]
    rows, wrong = [], []
    by_rule = {}
    for idx, (rule, o1, o2, want) in enumerate(cases):
        got = includes(o1, o2)
        rows.append([idx, rule, str(o1), str(o2), want, got])
        ok = got == want
        hit = by_rule.setdefault(rule, [0, 0])
        hit[0] += ok
        hit[1] += 1
        if not ok:
            wrong.append(idx)
    _write_csv(out / "inclusion_cases.csv", ["case", "rule", "from", "to", "expected", "got"], rows)

    est_rows, word_rows, misses = [], [], []
    worst = 0.0
    for name, (fn, claimed) in ORDER_FIELDS.items():
        f = _field(fn, claimed)
        est = estimate_order(f, n=n)
        target = f.claimed_order.as_floats()
        dev = max(abs(a - b) for a, b in zip(est.order, target))
        worst = max(worst, dev)
        if dev > s["order_tolerance"]:
            misses.append(name)
        est_rows.append([name, *(_r(v) for v in est.order), str(f.claimed_order), _r(dev)])
        word_rows += [[name, r["word"], r["face"], _r(r["slope"]), _r(r["r2"])] for r in est.rows]
    _write_csv(out / "order_estimates.csv", ["field", "m", "l", "k", "j", "constructed", "max_deviation"],
               est_rows)
    _write_csv(out / "order_words.csv", ["field", "word", "face", "slope", "r2"], word_rows)

    half_rows, half_bad = [], []
    margin = math.inf
    for name, (fn, m, l) in HALF_FIELDS.items():
        f = _field(fn, (m, l, 0, 0))
        for r in type_half_slopes(f, m, l, n=n, tol=s["slope_tolerance"]):
            half_rows.append([name, r["path"], r["word"], _r(r["slope"]), _r(r["bound"]),
                              _r(r["margin"]), _r(r["r2"]), r["passed"]])
            margin = min(margin, r["margin"])
            if not r["passed"]:
                half_bad.append(f"{name}:{r['path']}:{r['word']}")
    _write_csv(out / "type_half_slopes.csv",
               ["field", "path", "word", "slope", "bound", "margin", "r2", "passed"], half_rows)

    return {
        "C2": _verdict(not wrong and not misses, inclusion_cases=len(cases),
                       inclusion_mismatches=wrong,
                       per_rule={k: f"{a}/{b}" for k, (a, b) in by_rule.items()},
                       order_fields=len(ORDER_FIELDS), max_order_deviation=worst,
                       order_misses=misses, tolerance=s["order_tolerance"]),
        "C3": _verdict(not half_bad, fields=len(HALF_FIELDS), slopes=len(half_rows),
                       min_margin=margin, slope_tolerance=s["slope_tolerance"], violations=half_bad),
    }


# ---------------------------------------------------------------------------
# quantize

def _bump(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = np.abs(t) < 1
    out[m] = np.exp(1 - 1 / (1 - t[m] ** 2))
    return out


def _bump_tests(grid: GridSpec):
    xs, ys = grid.mesh()
    return np.stack([_bump((xs - c) / 0.03) * _bump((ys - d) / 0.1)
                     for c, d in [(0.11, 0.0), (0.12, 0.05), (0.10, -0.05)]], 1)


def _masked_ratio(grid: GridSpec, M, tests, mask) -> float:
    return max(weighted_norm(grid, mask * (M @ tests[:, k])) / weighted_norm(grid, tests[:, k])
               for k in range(tests.shape[1]))


def _sym_a(x, y, xi, eta):
    return np.exp(-(xi ** 2 + eta[:, 0] ** 2) / 4) * (1 + x) * (1 + 0.3 * np.sin(4 * y[:, 0])) + 0j


def _sym_b(x, y, xi, eta):
    return (1 + 1j * xi) * np.exp(-(xi ** 2 + eta[:, 0] ** 2) / 6) * np.exp(x) * (1 + 0.3 * np.cos(5 * y[:, 0]))


def _sym_adj(x, y, xi, eta):
    return (1 + 0.5j * xi + 0.3j * eta[:, 0]) * np.exp(-(xi ** 2 + eta[:, 0] ** 2) / 4) * (1 + x) * \
        (1 + 0.3 * np.sin(4 * y[:, 0]))


def _adjoint_gap(n: int):
    grid = GridSpec.uniform(0.02, 0.2, n, -0.4, 0.4, n)
    xs, _ = grid.mesh()
    tests = _bump_tests(grid)
    mask = (xs >= 0.06).astype(float)
    A = SymbolField(_sym_adj)
    QA = quantize(A, grid)
    QS = quantize(adjoint_symbol(A), grid)
    naive = quantize(SymbolField(lambda x, y, xi, eta: np.conj(_sym_adj(x, y, xi, eta))), grid)
    Aadj = QA.adjoint().entries
    return (_masked_ratio(grid, Aadj - QS.entries, tests, mask),
            _masked_ratio(grid, Aadj - naive.entries, tests, mask))


def suite_quantize(cfg: dict, out: Path, jobs: int = 1) -> dict:
    n = cfg["grid"]["n"]
    grid = GridSpec.uniform(0.02, 0.2, n, -0.4, 0.4, n)
    xs, ys = grid.mesh()
    one = quantize(SymbolField(lambda x, y, xi, eta: np.ones_like(xi) + 0j, SymbolOrder()), grid)
    id_rows, id_err = [], 0.0
    for c, d, w in [(0.11, 0.0, 0.03), (0.12, 0.05, 0.04), (0.10, -0.05, 0.03)]:
        u = np.exp(-((xs - c) / w) ** 2 - ((ys - d) / 0.1) ** 2)
        e = weighted_norm(grid, one.entries @ u - u) / weighted_norm(grid, u)
        id_rows.append([_r(c), _r(d), _r(w), _r(e)])
        id_err = max(id_err, e)
    _write_csv(out / "quantize_identity.csv", ["x0", "y0", "width", "relative_error"], id_rows)

    nc = cfg["grid"]["composition_n"]
    cg = GridSpec.uniform(0.02, 0.2, nc, -0.4, 0.4, nc)
    cx, _ = cg.mesh()
    tests = _bump_tests(cg)
    mask = (cx >= 0.06).astype(float)
    A, B = SymbolField(_sym_a), SymbolField(_sym_b)
    P = (quantize(A, cg) @ quantize(B, cg)).entries
    rem = []
    for N in (1, 2, 3):
        C = quantize(compose_symbols(A, B, N), cg).entries
        rem.append(_masked_ratio(cg, P - C, tests, mask))
    factors = [rem[0] / rem[1], rem[1] / rem[2]]
    _write_csv(out / "composition_remainder.csv", ["N", "remainder"],
               [[N, _r(v)] for N, v in zip((1, 2, 3), rem)])

    sizes = cfg["sweep"]["refinement"][:2]
    gaps = _pmap(_adjoint_gap, sizes, jobs)
    ratio = gaps[1][0] / gaps[0][0]
    _write_csv(out / "adjoint_refinement.csv", ["n", "adjoint_formula_gap", "conjugate_only_gap"],
               [[s, _r(a), _r(b)] for s, (a, b) in zip(sizes, gaps)])

    ok = id_err <= 1e-3 and min(factors) >= 1.7 and ratio <= 0.6
    return {"C4": _verdict(ok, identity_relative_error=id_err, identity_grid=f"{n}x{n}",
                           composition_remainders=rem, composition_decay_factors=factors,
                           composition_grid=f"{nc}x{nc}", adjoint_gaps=[g[0] for g in gaps],
                           adjoint_grids=sizes, adjoint_ratio=ratio,
                           conjugate_only_gaps=[g[1] for g in gaps])}


# ---------------------------------------------------------------------------
# normal operator

def _decay_rows(tag, decay):
    return [[tag, i, d["nodes"], _r(d["c1_branch_small_t"]), _r(d["c1_branch_large_t"]),
             _r(d["fraction_satisfied"]), d["holds"]] for i, d in enumerate(decay)]


DECAY_HEADER = ["assembly", "row", "nodes", "c1_small_t", "c1_large_t", "fraction_satisfied", "holds"]


def suite_normalop(cfg: dict, out: Path, jobs: int = 1) -> dict:
    p = cfg["normalop"]
    rows, worst = [], 0.0
    for alpha, F in [(1.0, 1.0), (4.0, 1.0), (1.0, 2.0)]:
        quad, closed = gaussian_moment(alpha, F)
        rel = abs(quad - closed) / abs(closed)
        worst = max(worst, rel)
        rows.append(["gaussian_moment", _r(alpha), _r(F), _r(quad), _r(closed), _r(rel)])
    one = lambda x, y, lam, om, t: np.ones(np.shape(t))
    fp = finite_point_symbol(one, 1.0, 1.0, 0.0, 0.0)
    fp_rel = abs(fp - 2 * math.pi ** 2) / (2 * math.pi ** 2)
    rows.append(["finite_point", "1.0", "1.0", _r(fp), _r(2 * math.pi ** 2), _r(fp_rel)])
    _write_csv(out / "anchors.csv", ["anchor", "alpha", "F", "computed", "closed_form", "relative_error"],
               rows)
    res = {"C5": _verdict(worst <= 1e-8 and fp_rel <= 1e-6, gaussian_moment_max_relative=worst,
                          finite_point_value=fp, finite_point_relative=fp_rel)}

    c, F = p["c"], p["F"]
    chart = ParaboloidChart(p["kappa"], c, 3)
    A = TestWeight(s=1.0, T=p["travel_time"], c=c)
    probes = []
    rep = symbol_structure_report(chart, A, F, probes=probes)
    write_probe_csv(probes, out / "symbol_probes.csv")
    write_fit_csv(rep["sigma_fits"] + rep["angle_fits"], out / "symbol_fits.csv")
    v = rep["verdicts"]
    _write_csv(out / "symbol_verdicts.csv", ["verdict", "passed", "measured"], [
        ["leading", v["leading"], _r(rep["leading"]["tau_exponent"])],
        ["subprincipal", v["subprincipal"], _r(max(rep["subprincipal"]["relative_error"]))],
        ["subprincipal_x_exponent", v["subprincipal"], _r(rep["subprincipal"]["x_exponent"])],
        ["third_order", v["third_order"], _r(rep["third_order"]["relative_error"])],
        ["ellipticity", v["ellipticity"], _r(rep["ellipticity"]["c"])],
    ])
    res["C7"] = _verdict(all(v.values()), verdicts=v,
                         leading_tau_exponent=rep["leading"]["tau_exponent"],
                         leading_min=min(rep["leading"]["a1"]),
                         subprincipal_max_relative=max(rep["subprincipal"]["relative_error"]),
                         subprincipal_x_exponent=rep["subprincipal"]["x_exponent"],
                         third_order_relative=rep["third_order"]["relative_error"],
                         ellipticity_c=rep["ellipticity"]["c"])

    na = p["assembly_n"]
    half = float(chart.lens_halfwidth(0.0))
    grid = GridSpec.uniform(c / 16, c, na, -half, half, na)
    decay = []
    normal_operator_matrix(grid, chart, A, F, decay=decay)
    res["_decay"] = [("normalop", decay)]
    return res


# ---------------------------------------------------------------------------
# recovery

def _truth(c: float) -> BumpTruth:
    return BumpTruth(0.6 * c, 0.0, 0.3 * c, 0.6 * math.sqrt(c))


def _problem(rc: dict, c: float, F: float, n: int, truth=None) -> RecoveryProblem:
    return RecoveryProblem.default(c=c, n=n, F=F, truth=truth, band=rc["band"],
                                   top_margin=rc["top_margin"])


def _sweep_point(args):
    rc, c, F, n = args
    prob = _problem(rc, c, F, n)
    decay = []
    N, Nt = assemble_normal_operators(prob, decay=decay)
    ops = Operators(N, Nt)
    build_error_operator(prob, ops)
    elliptic_combination(prob, ops)
    eps = contraction_epsilon(prob, ops)
    return {"c": c, "F": F, "n": n, "epsilon": eps,
            "parametrix_residual": ops.meta["parametrix_residual"][-1], "decay": decay}


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def suite_recover(cfg: dict, out: Path, jobs: int = 1) -> dict:
    rc = cfg["recover"]
    sw = cfg["sweep"]
    nsw = cfg["grid"]["sweep_n"]
    pts = [(rc, c, F, nsw) for F in sw["F"] for c in sw["c"]]
    sweep = _pmap(_sweep_point, pts, jobs)
    _write_csv(out / "epsilon_sweep.csv", ["c", "F", "n", "epsilon", "parametrix_residual"],
               [[_r(s["c"]), _r(s["F"]), s["n"], _r(s["epsilon"]), _r(s["parametrix_residual"])]
                for s in sweep])
    decay = [(f"sweep_c={s['c']:g}_F={s['F']:g}", s["decay"]) for s in sweep]

    F0 = sw["F"][0]
    primary = sorted((s for s in sweep if s["F"] == F0), key=lambda s: s["c"])
    cs = np.array([s["c"] for s in primary])
    eps = np.array([s["epsilon"] for s in primary])
    decreasing = bool(np.all(np.diff(eps) > 0))
    rate = float(np.polyfit(np.log(cs), np.log(eps), 1)[0])
    f_monotone = {}
    for c in sw["c"]:
        col = [s["epsilon"] for s in sorted(sweep, key=lambda s: s["F"]) if s["c"] == c]
        f_monotone[f"{c:g}"] = bool(np.all(np.diff(col) <= 0))

    c, F, n = rc["c"], rc["F"], cfg["grid"]["n"]
    truth = _truth(c)
    prob = _problem(rc, c, F, n, truth)
    prob.check_support()
    dec = []
    N, Nt = assemble_normal_operators(prob, decay=dec)
    decay.append((f"recovery_c={c:g}", dec))
    ops = Operators(N, Nt)
    build_error_operator(prob, ops)
    elliptic_combination(prob, ops)
    eps_rec = contraction_epsilon(prob, ops)
    xs, ys = prob.grid.mesh()
    f_true = np.exp(-F / xs) * truth(xs, ys)
    data = synthetic_data(prob, ops, "rays")
    data_m = synthetic_data(prob, ops, "matrix")
    mismatch = [weighted_norm(prob.grid, a - b) / weighted_norm(prob.grid, b) for a, b in zip(data, data_m)]
    res = recover(prob, data, ops, rc["max_iter"], rc["tol"], reference=f_true)
    res_m = recover(prob, data_m, ops, rc["max_iter"], rc["tol"], reference=f_true)
    zero = recover(prob, (np.zeros_like(xs), np.zeros_like(xs)), ops, rc["max_iter"], rc["tol"])
    zero_max = float(np.max(np.abs(zero.f)))
    err = res.errors[-1] if res.errors else math.inf

    _write_csv(out / "recovery_history.csv", ["iteration", "update", "error"],
               [[i + 1, _r(u), _r(e)] for i, (u, e) in enumerate(zip(res.updates, res.errors))])
    _write_csv(out / "recovery_report.csv", ["quantity", "value"], [
        ["c", _r(c)], ["F", _r(F)], ["n", n], ["epsilon", _r(eps_rec)],
        ["relative_error_ray_data", _r(err)], ["iterations", len(res.updates)],
        ["converged", res.converged],
        ["relative_error_matrix_data", _r(res_m.errors[-1] if res_m.errors else math.inf)],
        ["data_mismatch_channel_x", _r(mismatch[0])], ["data_mismatch_channel_y", _r(mismatch[1])],
        ["zero_truth_max_abs", _r(zero_max)],
    ])
    write_bbg1(out / "reconstruction_f.bbg1", prob.grid, res.f)
    write_bbg1(out / "truth_f.bbg1", prob.grid, f_true)
    (out / "recovery_grid.json").write_text(prob.grid.to_json())

    ok = (decreasing and rate >= rc["rate_min"] and err <= rc["error_tol"] and res.converged
          and zero_max <= rc["zero_tol"])
    return {
        "C8": _verdict(ok, c_values=cs.tolist(), epsilon=eps.tolist(), sweep_grid=f"{nsw}x{nsw}",
                       strictly_decreasing=decreasing, fitted_rate=rate, rate_min=rc["rate_min"],
                       recovery_grid=f"{n}x{n}", recovery_c=c, recovery_epsilon=eps_rec,
                       recovery_relative_error=err, recovery_iterations=len(res.updates),
                       recovery_converged=res.converged,
                       matrix_data_relative_error=res_m.errors[-1] if res_m.errors else None,
                       data_mismatch=mismatch, zero_truth_max_abs=zero_max,
                       epsilon_nonincreasing_in_F=f_monotone),
        "_decay": decay,
    }


SUITE_FUNCS = {
    "geometry": suite_geometry,
    "symbols": suite_symbols,
    "quantize": suite_quantize,
    "normalop": suite_normalop,
    "recover": suite_recover,
}


def _decay_verdict(groups, out: Path) -> dict:
    rows, bad = [], []
    nodes = 0
    for tag, decay in groups:
        rows += _decay_rows(tag, decay)
        for i, d in enumerate(decay):
            nodes += d["nodes"]
            if not (d["holds"] and d["fraction_satisfied"] == 1.0):
                bad.append(f"{tag}#{i}")
    _write_csv(out / "decay_lemma.csv", DECAY_HEADER, rows)
    frac = min((d["fraction_satisfied"] for _, dd in groups for d in dd), default=1.0)
    return _verdict(not bad, assemblies=len(groups), rows=len(rows), nodes=nodes,
                    min_fraction_satisfied=frac, failing_rows=bad)


# ---------------------------------------------------------------------------
# run

def _selected(suite: str):
    return [s for s in SUITE_FUNCS] if suite == "all" else [suite]


def _execute(cfg: dict, suites, out: Path, jobs: int, log=None):
    results, decay, timings = {}, [], {}
    for name in suites:
        t0 = time.perf_counter()
        if log:
            log(f"[bbcalc] {name} ...")
        try:
            res = SUITE_FUNCS[name](cfg, out, jobs)
        except Exception as exc:       # a crashed suite fails its criteria, the run goes on
            res = {cid: {"status": "fail", "measured": {"error": f"{type(exc).__name__}: {exc}"}}
                   for cid in SUITE_CRITERIA[name] if cid != "C6"}
        decay += res.pop("_decay", [])
        results.update(res)
        timings[name] = time.perf_counter() - t0
        if log:
            log(f"[bbcalc] {name} done in {timings[name]:.1f} s")
    return results, decay, timings


def _csv_digests(root: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.glob("*.csv"))}


def _determinism(cfg: dict, out: Path, jobs: int) -> dict:
    suites = cfg["determinism"]["suites"]
    if not suites:
        return {"status": "not_run", "measured": {}}
    first = _csv_digests(out)
    with tempfile.TemporaryDirectory(prefix="bbcalc-rerun-") as tmp:
        tdir = Path(tmp)
        _execute(cfg, suites, tdir, jobs)
        second = _csv_digests(tdir)
    compared = sorted(set(first) & set(second))
    differ = [k for k in compared if first[k] != second[k]]
    return _verdict(bool(compared) and not differ, rerun_suites=suites, files_compared=compared,
                    mismatched=differ)


def run(cfg: dict, out_dir=None, jobs: int = 1, seed: int | None = None, log=None) -> int:
    """Run the configured suite; returns the process exit code (0 when every run criterion passes)."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    results, decay, timings = _execute(cfg, _selected(cfg["suite"]), out, jobs, log)
    if decay:
        results["C6"] = _decay_verdict(decay, out)
    if cfg["suite"] == "all":
        if log:
            log("[bbcalc] determinism rerun ...")
        results["C9"] = _determinism(cfg, out, jobs)
    criteria = {}
    for cid, name in CRITERIA.items():
        r = results.get(cid, {"status": "not_run", "measured": {}})
        criteria[cid] = {"name": name, "status": r["status"], "passed": r["status"] == "pass",
                         "measured": r["measured"]}
    summary = {
        "version": __version__,
        "suite": cfg["suite"],
        "seed": cfg["seed"],
        "jobs": jobs,
        "criteria": criteria,
        "artifacts": sorted(p.name for p in out.iterdir() if p.name != "summary.json"),
        "csv_sha256": _csv_digests(out),
        "timings_s": {**timings, "total": time.perf_counter() - t0},
    }
    (out / "summary.json").write_text(json.dumps(_plain(summary), indent=2) + "\n")
    failed = [cid for cid, r in criteria.items() if r["status"] == "fail"]
    if log:
        for cid, r in criteria.items():
            log(f"[bbcalc] {cid} {r['name']}: {r['status']}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# plot data

PLOT_SOURCES = {
    "symbol_probes.csv": "symbol_decay_*.dat",
    "epsilon_sweep.csv": "epsilon_curve.dat",
    "recovery_history.csv": "recovery_error.dat",
    "symbol_fits.csv": "fit_residuals.dat",
}


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _dat(path: Path, header_lines, columns, rows) -> None:
    with open(path, "w") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        fh.write("# " + " ".join(columns) + "\n")
        for r in rows:
            fh.write(" ".join(str(v) for v in r) + "\n")


def emit_plots(run_dir) -> list:
    """Write gnuplot-ready ``.dat`` files next to the run's CSVs; returns their paths."""
    root = Path(run_dir)
    have = {name for name in PLOT_SOURCES if (root / name).is_file()}
    summary = root / "summary.json"
    if not summary.is_file() or not have:
        expected = ["summary.json"] + list(PLOT_SOURCES)
        missing = [e for e in expected if not (root / e).is_file()]
        raise FileNotFoundError(f"{root} is not a completed run; missing: " + ", ".join(missing))
    listed = set(json.loads(summary.read_text()).get("artifacts", []))
    lost = sorted(n for n in PLOT_SOURCES if n in listed and n not in have)
    if lost:
        raise FileNotFoundError(f"{root}: artifacts listed in summary.json are missing: " + ", ".join(lost))
    written = []

    if "symbol_probes.csv" in have:
        groups = {}
        for r in _read_csv(root / "symbol_probes.csv"):
            xi, eta = float(r["xi"]), float(r["eta"])
            key = (float(r["x"]), round(math.atan2(abs(xi), abs(eta)), 9))
            groups.setdefault(key, []).append((1.0 / math.sqrt(1 + xi * xi + eta * eta),
                                               float(r["re_a"]), float(r["im_a"])))
        for i, ((x, ang), pts) in enumerate(sorted(groups.items())):
            pts.sort()
            rho = np.array([p[0] for p in pts])
            mag = np.array([math.hypot(p[1], p[2]) for p in pts])
            ok = mag > 0
            slope, icpt = (np.polyfit(np.log(rho[ok]), np.log(mag[ok]), 1) if ok.sum() >= 2
                           else (float("nan"), float("nan")))
            p = root / f"symbol_decay_{i:02d}.dat"
            _dat(p, [f"x = {x!r}  angle_from_sigma = {ang!r}",
                     f"fit: log|a| = {slope!r} * log(rho) + {icpt!r}"],
                 ["rho", "abs_a", "re_a", "im_a"],
                 [(repr(r_), repr(m), repr(a), repr(b)) for (r_, a, b), m in zip(pts, mag)])
            written.append(p)

    if "epsilon_sweep.csv" in have:
        rows = _read_csv(root / "epsilon_sweep.csv")
        Fs = sorted({float(r["F"]) for r in rows})
        for k, F in enumerate(Fs):
            sel = sorted(((float(r["c"]), float(r["epsilon"])) for r in rows if float(r["F"]) == F))
            name = "epsilon_curve.dat" if k == 0 else f"epsilon_curve_F{F:g}.dat"
            lc, le = np.log([s[0] for s in sel]), np.log([s[1] for s in sel])
            rate = float(np.polyfit(lc, le, 1)[0]) if len(sel) >= 2 else float("nan")
            _dat(root / name, [f"F = {F!r}  fitted rate = {rate!r}"], ["c", "epsilon"],
                 [(repr(c), repr(e)) for c, e in sel])
            written.append(root / name)

    if "recovery_history.csv" in have:
        rows = _read_csv(root / "recovery_history.csv")
        _dat(root / "recovery_error.dat", [], ["iteration", "error", "update"],
             [(r["iteration"], r["error"], r["update"]) for r in rows])
        written.append(root / "recovery_error.dat")

    if "symbol_fits.csv" in have:
        rows = _read_csv(root / "symbol_fits.csv")
        _dat(root / "fit_residuals.dat", [], ["index", "resid", "a1", "a2_over_x", "a3", "direction"],
             [(i, r["resid"], r["a1"], r["a2_over_x"], r["a3"], r["direction"].replace(" ", "_"))
              for i, r in enumerate(rows)])
        written.append(root / "fit_residuals.dat")
    return written


# ---------------------------------------------------------------------------
# CLI

def _jobs(arg) -> int:
    raw = arg if arg is not None else os.environ.get("BBCALC_JOBS")
    if raw is None or raw == "":
        return 1
    try:
        j = int(raw)
    except (TypeError, ValueError):
        raise ConfigError([f"jobs: expected a positive integer, got {raw!r}"]) from None
    if j < 1:
        raise ConfigError([f"jobs: expected a positive integer, got {raw!r}"])
    return j


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bbcalc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"bbcalc {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)
    pr = sub.add_parser("run", help="run a verification suite or recovery experiment")
    pr.add_argument("config")
    pr.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    pr.add_argument("--jobs", default=None, help="worker processes (fallback: BBCALC_JOBS)")
    pr.add_argument("--seed", type=int, default=None, help="override the configured seed")
    pr.add_argument("--quiet", action="store_true")
    pp = sub.add_parser("plots", help="write .dat plot files for a finished run")
    pp.add_argument("run_dir")
    args = ap.parse_args(argv)

    if args.cmd == "run":
        try:
            cfg = load_config(args.config)
            jobs = _jobs(args.jobs)
            if args.seed is not None and not 0 <= args.seed < 2 ** 64:
                raise ConfigError(["seed: must be an unsigned 64-bit integer"])
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"cannot read configuration: {exc}", file=sys.stderr)
            return 2
        log = None if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True))
        return run(cfg, args.out, jobs, args.seed, log)

    try:
        for p in emit_plots(args.run_dir):
            print(p)
    except FileNotFoundError as exc:
        print(exc, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
