"""Four-index symbol orders, weights and empirical membership tests.

A symbol of order ``(m, l, k, j)`` is bounded, together with all its
derivatives along lifted boundary-tangent vector fields, by

    rho^{-m} x^{-l} d_sigma^{-k} d_gamma^{-j}.

Orders are exact rationals.  Membership of a concrete field is tested
empirically: slopes of ``log |V^alpha f|`` against the defining function of
one boundary face at a time, along dyadic approach paths.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .geometry import (
    GeneratorVectorField,
    apply_generator,
    blowup_from_second,
    defining_functions,
    fiber_from_blowup,
)

__all__ = [
    "SymbolOrder",
    "SymbolField",
    "parse_order",
    "weight",
    "includes",
    "approach_path",
    "estimate_order",
    "is_elliptic",
    "reciprocal_symbol",
    "structural_ellipticity_check",
    "type_half_slopes",
    "write_order_report",
]

PROVED = "proved"
UNKNOWN = "unknown"


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        s = v.strip()
        if "/" in s:
            num, den = s.split("/", 1)
            if int(den) == 0:
                raise ValueError(f"zero denominator in order literal {v!r}")
            return Fraction(int(num), int(den))
        return Fraction(s)
    if isinstance(v, float):
        return Fraction(v).limit_denominator(10 ** 6)
    return Fraction(v)


@dataclass(frozen=True)
class SymbolOrder:
    """Order quadruple in (rho, x, d_sigma, d_gamma)."""

    m: Fraction
    l: Fraction
    k: Fraction
    j: Fraction

    def __init__(self, m=0, l=0, k=0, j=0):
        object.__setattr__(self, "m", _frac(m))
        object.__setattr__(self, "l", _frac(l))
        object.__setattr__(self, "k", _frac(k))
        object.__setattr__(self, "j", _frac(j))

    def __add__(self, other: "SymbolOrder") -> "SymbolOrder":
        return SymbolOrder(self.m + other.m, self.l + other.l, self.k + other.k, self.j + other.j)

    def __neg__(self) -> "SymbolOrder":
        return SymbolOrder(-self.m, -self.l, -self.k, -self.j)

    def __sub__(self, other: "SymbolOrder") -> "SymbolOrder":
        return self + (-other)

    def as_tuple(self):
        return (self.m, self.l, self.k, self.j)

    def as_floats(self):
        return tuple(float(v) for v in self.as_tuple())

    def __str__(self):
        return "(" + ",".join(str(v) for v in self.as_tuple()) + ")"


def parse_order(values) -> SymbolOrder:
    """Parse four order literals such as ``["-1", "0", "1/2", "-2"]``."""
    vals = list(values)
    if len(vals) != 4:
        raise ValueError("an order has exactly four entries")
    return SymbolOrder(*vals)


@dataclass
class SymbolField:
    """Complex scalar field on cotangent points with a claimed order.

    ``eval`` has signature ``(x, y, xi, eta) -> (N,)`` on batched arrays.
    """

    eval: Callable
    claimed_order: SymbolOrder = field(default_factory=SymbolOrder)
    support_hint: Callable | None = None
    name: str = ""

    def __call__(self, x, y, xi, eta):
        return self.eval(x, y, xi, eta)


def weight(p, o: SymbolOrder, return_flag: bool = False):
    """``rho^{-m} x^{-l} d_sigma^{-k} d_gamma^{-j}`` at one or many points.

    Boundary points hit with a negative power give ``inf``; with
    ``return_flag`` a boolean mask of those points is returned too.
    """
    d = defining_functions(*p) if isinstance(p, tuple) else defining_functions(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        parts = []
        for base, e in ((d.rho, o.m), (d.xval, o.l), (d.d_sigma, o.k), (d.d_gamma, o.j)):
            e = float(e)
            if e == 0:
                parts.append(np.ones_like(base))
            else:
                parts.append(np.where(base == 0, np.inf if e > 0 else 0.0, base ** (-e)))
        w = parts[0] * parts[1] * parts[2] * parts[3]
    if return_flag:
        return w, np.isinf(w)
    return w


# ---------------------------------------------------------------------------
# inclusion lattice

def _inclusion_interval(o1: SymbolOrder, o2: SymbolOrder):
    """Exact set of split parameters s in [0, 1] making the combined rule apply.

    The combined exchange rule, followed by monotone raising, gives
    S^{o1} in S^{o2} iff for some s in [0, 1]

        m1 + (k1 - k2 + s D)_+ / 2 <= m2,   l1 + (1 - s) D / 2 <= l2,

    where D = (j1 - j2)_+.  The other three rules are special cases.
    Returns ``(lo, hi)`` or ``None``.
    """
    M = 2 * (o2.m - o1.m)
    L = 2 * (o2.l - o1.l)
    if M < 0 or L < 0:
        return None
    K = o1.k - o2.k
    D = max(o1.j - o2.j, Fraction(0))
    if D == 0:
        return (Fraction(0), Fraction(1)) if K <= M else None
    lo = max(Fraction(0), 1 - L / D)
    hi = min(Fraction(1), (M - K) / D)
    return (lo, hi) if lo <= hi else None


def includes(o1: SymbolOrder, o2: SymbolOrder, grid: int | None = 8) -> str:
    """Sufficient test for ``S^{o1} subset S^{o2}``.

    With ``grid`` set, the split parameter is searched over
    ``{0, 1/grid, ..., 1}``; with ``grid=None`` the feasible interval is
    solved exactly.  Returns ``"proved"`` or ``"unknown"``; the lattice is
    not claimed complete.
    """
    iv = _inclusion_interval(o1, o2)
    if iv is None:
        return UNKNOWN
    if grid is None:
        return PROVED
    lo, hi = iv
    for q in range(grid + 1):
        s = Fraction(q, grid)
        if lo <= s <= hi:
            return PROVED
    return UNKNOWN


# ---------------------------------------------------------------------------
# empirical order estimation

FACES = ("rho_tilde", "x", "d_sigma", "d_gamma")


def approach_path(face: str, base=None, decades: int = 4, per_decade: int = 10, n: int = 2,
                  start: float = 1e-1):
    """Dyadic path approaching one boundary hypersurface of the blown-up space.

    ``base`` holds second-chart data ``(x, y, d_sigma, tau_tilde)``.  Along
    the path only the chosen defining function tends to zero; the others
    stay bounded away from zero.  Returns ``(b, pts)`` with ``b`` the values
    of that defining function and ``pts`` batched cotangent arrays.
    """
    ntau = n - 1
    if base is None:
        e = np.zeros(ntau)
        e[0] = 1.0
        base = (0.3, np.full(n - 1, 0.2), 0.3, 0.5 * e)
    x0, y0, ds0, tt0 = base
    tt0 = np.asarray(tt0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    s = start * 10.0 ** (-np.arange(decades * per_decade + 1) / per_decade)
    cnt = len(s)
    y = np.tile(y0, (cnt, 1))
    if face == "rho_tilde":
        u = tt0 / np.linalg.norm(tt0)
        rt0 = 1.0 - np.sum(tt0 ** 2)
        rt = rt0 * s
        x, ds = np.full(cnt, x0), np.full(cnt, ds0)
        tt = np.sqrt(1.0 - rt)[:, None] * u[None, :]
    elif face == "x":
        x, ds, tt = x0 * s, np.full(cnt, ds0), np.tile(tt0, (cnt, 1))
    elif face == "d_sigma":
        x, ds, tt = np.full(cnt, x0), ds0 * s, np.tile(tt0, (cnt, 1))
    elif face == "d_gamma":
        g0 = np.sqrt(x0 + ds0 ** 2 + np.sum(tt0 ** 2))
        g = g0 * s
        x = (x0 / g0 ** 2) * g ** 2
        ds = (ds0 / g0) * g
        tt = (tt0 / g0)[None, :] * g[:, None]
    else:
        raise ValueError(f"unknown face {face!r}")
    rho, tau = blowup_from_second(ds, tt)
    xi, eta = fiber_from_blowup(rho, tau)
    pts = (x, y, xi, eta)
    d = defining_functions(*pts)
    bval = {"rho_tilde": d.rho_tilde, "x": d.xval / d.d_gamma ** 2,
            "d_sigma": d.d_sigma / d.d_gamma, "d_gamma": d.d_gamma}[face]
    return bval, pts


def _apply_word(word: Sequence[GeneratorVectorField], f, step: float):
    g = f
    for V in reversed(list(word)):
        g = (lambda VV, gg: (lambda x, y, xi, eta: apply_generator(
            VV, gg, (x, y, xi, eta), exact=False, step=step)))(V, g)
    return g


def default_words(n: int = 2, max_len: int = 2):
    """Words in the generating family x d/dx, d/dy, rho d/drho, d_gamma d_sigma d/dtau."""
    gens = [GeneratorVectorField("x_dx"), GeneratorVectorField("rho_drho")]
    gens += [GeneratorVectorField("dy", j=j) for j in range(n - 1)]
    gens += [GeneratorVectorField("dgds_dtau", j=j) for j in range(n - 1)]
    words = [()]
    for L in range(1, max_len + 1):
        words += list(itertools.product(gens, repeat=L))
    return words


def _fit_slope(b, v):
    lb, lv = np.log(b), np.log(v)
    A = np.column_stack([lb, np.ones_like(lb)])
    coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((lv - pred) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


@dataclass
class OrderEstimate:
    order: tuple
    face_exponents: dict
    rows: list
    nonconvergent: list

    def within(self, claimed: SymbolOrder, tol: float = 0.1) -> bool:
        return all(e <= float(c) + tol for e, c in zip(self.order, claimed.as_tuple()))


def estimate_order(f, words=None, paths=None, n: int = 2, step: float | None = None,
                   decades: int = 4, per_decade: int = 10, noise: float = 1e-6,
                   tail_decades: int = 2):
    """Fit the order of ``f`` from slopes of ``|V^alpha f|`` along boundary paths.

    For each face with defining function ``b`` the worst exponent over
    words gives the face order ``e_b`` (``|V^alpha f| <~ b^{-e_b}``).  With
    the weight rewritten as

        rho_t^{-m} (x/d_gamma^2)^{-l} (d_sigma/d_gamma)^{-(2m+k)} d_gamma^{-(2m+2l+k+j)},

    the four face orders convert to ``(m, l, k, j)``.

    Parameters
    ----------
    f : callable
    words : list of generator words (tuples); default: all words up to length 2
    paths : dict face -> list of second-chart base points
    n : int
        Dimension of the chart.
    step : float, optional
        Relative finite-difference step; by default ``1e-4`` for single
        derivatives and ``1e-3`` for longer words.
    noise : float
        Derivative values below ``noise * |f|`` at the same point are treated
        as finite-difference noise (the steps are relative, so the roundoff
        scales with the local value).  Such a word decays faster than ``f``
        itself and cannot limit the order; with fewer than five points left
        it is skipped.

    Returns
    -------
    OrderEstimate
    """
    words = default_words(n) if words is None else words
    if paths is None:
        e = np.zeros(n - 1)
        e[0] = 1.0
        paths = {face: [(0.3, np.full(n - 1, 0.2), 0.3, 0.5 * e),
                        (0.05, np.full(n - 1, -0.4), 0.15, 0.3 * e)] for face in FACES}
    rows, bad = [], []
    face_exp = {}
    for face in FACES:
        worst = -np.inf
        for base in paths[face]:
            b, pts = approach_path(face, base, decades, per_decade, n)
            base_abs = np.abs(f(*pts))
            floor = 1e-300
            # the regression uses the decades closest to the face, where the
            # leading behaviour has taken over
            tail = np.arange(len(b)) >= len(b) - tail_decades * per_decade - 1
            for w in words:
                h = step if step is not None else (1e-4 if len(w) <= 1 else 1e-3)
                g = _apply_word(w, f, h) if w else f
                v = np.abs(g(*pts))
                if w:
                    keep = (v > noise * base_abs + floor) & tail
                else:
                    keep = (v > floor) & tail
                if keep.sum() < 5:
                    continue
                slope, r2 = _fit_slope(b[keep], v[keep])
                label = "*".join(V.label for V in w) or "id"
                rows.append({"word": label, "face": face, "slope": slope, "r2": r2})
                # a flat profile has no meaningful r^2
                if r2 < 0.99 and abs(slope) > 0.05:
                    bad.append((label, face, r2))
                worst = max(worst, -slope)
        face_exp[face] = worst
    m = face_exp["rho_tilde"]
    l = face_exp["x"]
    k = face_exp["d_sigma"] - 2 * m
    j = face_exp["d_gamma"] - 2 * m - 2 * l - k
    return OrderEstimate((m, l, k, j), face_exp, rows, bad)


def write_order_report(est: OrderEstimate, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "face", "slope", "r2"])
        for r in est.rows:
            w.writerow([r["word"], r["face"], repr(r["slope"]), repr(r["r2"])])


# ---------------------------------------------------------------------------
# type-1/2 estimates

B_FIELDS = ("x_dx", "rho_drho", "dy", "dtau")


def _b_derivative(kind: str, f, pts, h: float, j: int = 0):
    """b-vector fields on the radially compactified bundle: x d_x, rho d_rho, d_y, d_tau."""
    x, y, xi, eta = pts
    d = defining_functions(*pts)
    rho, tau = d.rho, d.tau

    def ev(xx, yy, rr, tt):
        a, b = fiber_from_blowup(rr, tt)
        return f(xx, yy, a, b)

    if kind == "x_dx":
        return (ev(x * np.exp(h), y, rho, tau) - ev(x * np.exp(-h), y, rho, tau)) / (2 * h)
    if kind == "rho_drho":
        return (ev(x, y, rho * np.exp(h), tau) - ev(x, y, rho * np.exp(-h), tau)) / (2 * h)
    if kind == "dy":
        e = np.zeros_like(y)
        e[:, j] = h
        return (ev(x, y + e, rho, tau) - ev(x, y - e, rho, tau)) / (2 * h)
    if kind == "dtau":
        # scale the step with the local size of the blow-up so that nested
        # differences resolve the parabolic structure
        hs = h * np.minimum(d.d_sigma * d.d_gamma, 1.0)
        e = np.zeros_like(tau)
        e[:, j] = hs
        return (ev(x, y, rho, tau + e) - ev(x, y, rho, tau - e)) / (2 * hs)
    raise ValueError(kind)


def type_half_slopes(f, m: float, l: float, max_len: int = 2, n: int = 2,
                     decades: int = 4, per_decade: int = 10, h: float = 1e-4,
                     tol: float = 0.1, noise: float = 1e-6):
    """Slopes of b-derivatives of ``f`` against the type-1/2 bound.

    The bound is ``|V^alpha f| <= C rho^{-m-|alpha|/2} x^{-l-|alpha|/2}``.  Paths:
    ``rho -> 0`` at fixed ``x`` with ``tau`` fixed, ``tau = 0`` and
    ``tau ~ rho^{1/2}``; and the diagonal ``x = rho -> 0`` with
    ``tau ~ rho^{1/2}``.  Returns a list of rows with the fitted slope, the
    bound slope and the margin ``slope - bound``.
    """
    s = 10.0 ** (-np.arange(decades * per_decade + 1) / per_decade)
    rho = 0.1 * s
    cnt = len(s)
    ntau = n - 1
    e = np.zeros(ntau)
    e[0] = 1.0
    paths = {
        "rho_tau_fixed": (np.full(cnt, 0.2), np.outer(np.full(cnt, 0.3), e), 1.0, 0.0),
        "rho_tau_zero": (np.full(cnt, 0.2), np.zeros((cnt, ntau)), 1.0, 0.0),
        "rho_tau_parabolic": (np.full(cnt, 0.2), np.outer(0.7 * np.sqrt(rho), e), 1.0, 0.0),
        "diagonal_x_eq_rho": (rho.copy(), np.outer(0.7 * np.sqrt(rho), e), 1.0, 1.0),
    }
    kinds = [("x_dx", 0), ("rho_drho", 0)] + [("dy", j) for j in range(n - 1)] + \
        [("dtau", j) for j in range(ntau)]
    rows = []
    y = np.full((cnt, n - 1), 0.3)
    for pname, (x, tau, cr, cx) in paths.items():
        xi, eta = fiber_from_blowup(rho, tau)
        pts = (x, y, xi, eta)
        base_abs = np.abs(f(*pts))
        for L in range(0, max_len + 1):
            for word in itertools.product(kinds, repeat=L):
                g = f
                for kind, j in reversed(word):
                    g = (lambda kk, jj, gg: (lambda *p: _b_derivative(kk, gg, p, h, jj)))(kind, j, g)
                v = np.abs(g(*pts))
                # derivatives below roundoff relative to the local value carry no slope
                keep = v > noise * base_abs + 1e-300 if L else v > 1e-300
                if keep.sum() < 5:
                    continue
                slope, r2 = _fit_slope(rho[keep], v[keep])
                bound = cr * (-m - L / 2) + cx * (-l - L / 2)
                label = "*".join(f"{k}{j + 1}" if k in ("dy", "dtau") else k for k, j in word) or "id"
                rows.append({"path": pname, "word": label, "slope": slope, "bound": bound,
                             "margin": slope - bound, "r2": r2, "passed": slope >= bound - tol})
    return rows


# ---------------------------------------------------------------------------
# ellipticity

def is_elliptic(f, samples, order: SymbolOrder | None = None) -> float:
    """Infimum of ``|f| / weight`` over the sample points (batched arrays)."""
    if samples is None or len(samples[0]) == 0:
        raise ValueError("empty sample region")
    o = order if order is not None else getattr(f, "claimed_order", SymbolOrder())
    w = weight(samples, o)
    return float(np.min(np.abs(f(*samples)) / w))


def reciprocal_symbol(f: SymbolField, cutoff: Callable, samples=None,
                      min_constant: float = 0.0) -> SymbolField:
    """``cutoff / f`` with order negated.

    ``cutoff(x, y, xi, eta)`` takes values in ``[0, 1]``; where it vanishes the
    result is zero and ``f`` is not divided.  If ``samples`` are given the
    ellipticity constant on them must exceed ``min_constant``.
    """
    if samples is not None:
        c = is_elliptic(f, samples)
        if not c > min_constant:
            raise ValueError(f"ellipticity precondition violated (measured c = {c:g})")

    def ev(x, y, xi, eta):
        chi = np.asarray(cutoff(x, y, xi, eta), dtype=float)
        out = np.zeros(np.broadcast(chi, x).shape, dtype=complex)
        on = chi > 0
        if np.any(on):
            sel = (x[on], y[on], xi[on], eta[on])
            out[on] = chi[on] / f(*sel)
        return out

    return SymbolField(ev, -f.claimed_order, name=f"1/({f.name})")


def structural_ellipticity_check(a_minus1: Callable, a_tilde: Callable, a_minus3: Callable,
                                 samples, quad_floor: float | None = None) -> dict:
    """Assemble ``a = a_{-1} rho + i x a_tilde rho^2 + a_{-3} rho^3`` and bound it below.

    Coefficients are callables of ``(x, y, tau)``.  Reports the constant
    ``c = min |a| / (rho d_sigma^2 d_gamma^2)``, the constant of the
    intermediate bound ``|a| >= C rho (|tau|^2 + rho^2 + x rho)``, the two
    regional constants (``rho_tilde >= 1/2`` and ``|tau_tilde|^2 >= 1/2``) and
    hypothesis diagnostics.
    """
    d = defining_functions(*samples)
    x, y = d.xval, samples[1]
    rho, tau = d.rho, d.tau
    tau2 = np.sum(tau ** 2, axis=1)
    a1 = np.real(a_minus1(x, y, tau))
    at = np.real(a_tilde(x, y, tau))
    a3 = np.real(a_minus3(x, y, tau))
    a = a1 * rho + 1j * x * at * rho ** 2 + a3 * rho ** 3
    w = rho * d.d_sigma ** 2 * d.d_gamma ** 2
    ratio = np.abs(a) / w
    inter = np.abs(a) / (rho * (tau2 + rho ** 2 + x * rho))
    b1 = d.rho_tilde >= 0.5
    b2 = ~b1
    hyp = {}
    hyp["a_minus1_nonnegative"] = bool(np.all(a1 >= -1e-14))
    off = tau2 > 0
    q = a1[off] / tau2[off]
    hyp["a_minus1_quadratic_constant"] = float(q.min()) if q.size else float("nan")
    sig = tau2 <= (quad_floor if quad_floor is not None else 1e-4)
    hyp["a_tilde_min_abs_near_sigma"] = float(np.min(np.abs(at[sig]))) if sig.any() else float("nan")
    hyp["a_minus3_min_near_sigma"] = float(np.min(a3[sig])) if sig.any() else float("nan")
    failures = []
    if not hyp["a_minus1_nonnegative"]:
        failures.append("a_minus1 negative at sampled points")
    if sig.any() and not hyp["a_tilde_min_abs_near_sigma"] > 0:
        failures.append("a_tilde vanishes near the degenerate set")
    if sig.any() and not hyp["a_minus3_min_near_sigma"] > 0:
        failures.append("a_minus3 not positive near the degenerate set")
    return {
        "c": float(ratio.min()),
        "intermediate_c": float(inter.min()),
        "branch_rho_tilde_ge_half": float(ratio[b1].min()) if b1.any() else float("nan"),
        "branch_tau_tilde_ge_half": float(ratio[b2].min()) if b2.any() else float("nan"),
        "parenthesis_min_rho_tilde_branch": float(
            ((np.sum(d.tau_tilde ** 2, axis=1) + d.d_sigma ** 2 * d.rho_tilde ** 2
              + x * d.rho_tilde) / d.d_gamma ** 2)[b1].min()) if b1.any() else float("nan"),
        "hypotheses": hyp,
        "failures": failures,
        "points": int(len(x)),
    }


def near_sigma_samples(count: int = 4000, n: int = 2, rho_max: float = 0.1, seed: int = 0,
                       x_range=(1e-4, 0.5)):
    """Random points with ``rho < rho_max`` concentrated near the degenerate set."""
    rng = np.random.default_rng(seed)
    x = np.exp(rng.uniform(np.log(x_range[0]), np.log(x_range[1]), count))
    rho = np.exp(rng.uniform(np.log(1e-5), np.log(rho_max), count))
    ntau = n - 1
    mag = np.exp(rng.uniform(np.log(1e-6), np.log(0.5), count))
    dirs = rng.normal(size=(count, ntau))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tau = dirs * np.minimum(mag, 0.9 * np.sqrt(1 - rho ** 2))[:, None]
    xi, eta = fiber_from_blowup(rho, tau)
    y = rng.uniform(-1, 1, (count, n - 1))
    return x, y, xi, eta
