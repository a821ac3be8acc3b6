"""Cotangent coordinates, the two blow-ups and their lifted vector fields.

A cotangent point is ``(x, y, xi, eta)`` with ``y`` and ``eta`` of length
``n - 1``.  The first tangential direction ``eta_1`` spans the degenerate
set; the remaining fiber directions are collected in

    tau = (rho*xi, rho*eta_2, ..., rho*eta_{n-1}),   rho = <(xi, eta)>^{-1}.

The first (parabolic) blow-up has front-face defining function
``d_sigma = (|tau|^2 + rho)^{1/2}``; the second one has
``d_gamma = (x + d_sigma^2 + |tau_tilde|^2)^{1/2}`` with
``tau_tilde = tau / d_sigma``.

Everything here is vectorised: a batch of points is four arrays
``x (N,)``, ``y (N, n-1)``, ``xi (N,)``, ``eta (N, n-1)``.  Scalar fields on
cotangent points are callables with that signature returning ``(N,)``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CotangentPoint",
    "DefiningFunctions",
    "GeneratorVectorField",
    "Target",
    "defining_functions",
    "fiber_from_blowup",
    "blowup_from_second",
    "apply_generator",
    "lift_identity_suite",
    "v2cgen_residuals",
    "boundary_ratio_profile",
    "random_cloud",
    "write_identity_report",
    "PrecisionWarning",
]

Field = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

FD_STEP = 1e-5


class PrecisionWarning(UserWarning):
    """Finite-difference step is close to the representable scale."""


@dataclass(frozen=True)
class CotangentPoint:
    """A single point of the scattering cotangent bundle in a foliation chart."""

    x: float
    y: tuple
    xi: float
    eta: tuple

    def __post_init__(self):
        vals = [self.x, self.xi, *self.y, *self.eta]
        if any(np.isnan(v) for v in vals):
            raise ValueError("NaN coordinate in cotangent point")
        if len(self.y) != len(self.eta) or len(self.eta) < 1:
            raise ValueError("y and eta must have the same length n-1 >= 1")
        if self.x < 0:
            raise ValueError("x must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.eta) + 1

    def arrays(self):
        return (
            np.array([float(self.x)]),
            np.array([self.y], dtype=float),
            np.array([float(self.xi)]),
            np.array([self.eta], dtype=float),
        )


@dataclass
class DefiningFunctions:
    """Boundary defining functions of the doubly blown-up space (batched)."""

    rho: np.ndarray
    xval: np.ndarray
    tau: np.ndarray
    tau_tilde: np.ndarray
    rho_tilde: np.ndarray
    d_sigma: np.ndarray
    d_gamma: np.ndarray

    def squeeze(self) -> "DefiningFunctions":
        """Drop a batch axis of length one (convenient for single points)."""
        return DefiningFunctions(
            *(np.squeeze(getattr(self, k), axis=0) for k in
              ("rho", "xval", "tau", "tau_tilde", "rho_tilde", "d_sigma", "d_gamma"))
        )


def _as_batch(x, y=None, xi=None, eta=None):
    if isinstance(x, CotangentPoint):
        return x.arrays()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None] if eta.shape[0] == x.shape[0] and x.shape[0] > 1 else eta[None, :]
    if y is None:
        y = np.zeros_like(eta)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y.reshape(eta.shape)
    for a in (x, xi, eta, y):
        if np.isnan(a).any():
            raise ValueError("NaN coordinate in cotangent point")
    return x, y, xi, eta


def defining_functions(x, y=None, xi=None, eta=None) -> DefiningFunctions:
    """Evaluate rho, tau, d_sigma, tau_tilde, rho_tilde and d_gamma.

    Accepts either a :class:`CotangentPoint` or batched arrays.  Returns
    batched arrays (use :meth:`DefiningFunctions.squeeze` for one point).
    """
    x, y, xi, eta = _as_batch(x, y, xi, eta)
    rho = 1.0 / np.sqrt(1.0 + xi ** 2 + np.sum(eta ** 2, axis=-1))
    tau = np.concatenate([(rho * xi)[:, None], rho[:, None] * eta[:, 1:]], axis=1)
    tau2 = np.sum(tau ** 2, axis=1)
    d_sigma = np.sqrt(tau2 + rho)
    tau_tilde = tau / d_sigma[:, None]
    rho_tilde = rho / d_sigma ** 2
    d_gamma = np.sqrt(x + d_sigma ** 2 + np.sum(tau_tilde ** 2, axis=1))
    return DefiningFunctions(rho, x, tau, tau_tilde, rho_tilde, d_sigma, d_gamma)


def fiber_from_blowup(rho, tau):
    """Invert ``(rho, tau) -> (xi, eta)`` on the chart ``eta_1 > 0``.

    Requires ``rho^2 + |tau|^2 < 1`` so that ``eta_1`` is real.
    """
    rho = np.asarray(rho, dtype=float)
    tau = np.asarray(tau, dtype=float)
    tau2 = np.sum(tau ** 2, axis=-1)
    disc = rho ** -2 - 1.0 - tau2 / rho ** 2
    if np.any(disc < 0):
        raise ValueError("(rho, tau) outside the eta_1 > 0 chart")
    xi = tau[..., 0] / rho
    eta = np.concatenate([np.sqrt(disc)[..., None], tau[..., 1:] / rho[..., None]], axis=-1)
    return xi, eta


def blowup_from_second(d_sigma, tau_tilde):
    """Map second-chart coordinates ``(d_sigma, tau_tilde)`` to ``(rho, tau)``."""
    d_sigma = np.asarray(d_sigma, dtype=float)
    tau_tilde = np.asarray(tau_tilde, dtype=float)
    rho = (1.0 - np.sum(tau_tilde ** 2, axis=-1)) * d_sigma ** 2
    return rho, tau_tilde * d_sigma[..., None]


# ---------------------------------------------------------------------------
# generators

_FIRST_CHART = {"x_dx", "dy", "rho_drho", "dgds_dtau", "tau_dtau", "rho_dtau",
                "sqrtxrho_dtau", "ds_dtau"}
_SECOND_CHART = {"ds_dds", "dg_dttil", "x_dx2"}


@dataclass(frozen=True)
class GeneratorVectorField:
    """A lifted vector field, named by what it does.

    ``kind`` is one of

    ========================  =============================================
    ``x_dx``                  x d/dx at fixed (y, rho, tau)
    ``dy``                    d/dy_j
    ``rho_drho``              rho d/drho at fixed (x, y, tau)
    ``dgds_dtau``             d_gamma d_sigma d/dtau_j
    ``tau_dtau``              tau_i d/dtau_j
    ``rho_dtau``              rho d/dtau_j
    ``sqrtxrho_dtau``         x^{1/2} rho^{1/2} d/dtau_j
    ``ds_dtau``               d_sigma d/dtau_j (first-blow-up table)
    ``ds_dds``                d_sigma d/dd_sigma at fixed (x, tau_tilde)
    ``dg_dttil``              d_gamma d/dtau_tilde_j at fixed (x, d_sigma)
    ``x_dx2``                 x d/dx at fixed (d_sigma, tau_tilde)
    ========================  =============================================

    Indices are zero-based.
    """

    kind: str
    i: int | None = None
    j: int | None = None

    def __post_init__(self):
        if self.kind not in _FIRST_CHART | _SECOND_CHART:
            raise ValueError(f"unknown generator kind {self.kind!r}")

    @property
    def label(self) -> str:
        idx = "".join(str(v + 1) for v in (self.i, self.j) if v is not None)
        return self.kind + (idx if idx else "")


@dataclass(frozen=True)
class Target:
    """A built-in scalar field with an exact derivative table."""

    name: str
    i: int | None = None

    def __call__(self, x, y, xi, eta):
        return self.value(defining_functions(x, y, xi, eta))

    def value(self, d: DefiningFunctions) -> np.ndarray:
        n = self.name
        if n == "d_sigma":
            return d.d_sigma
        if n == "rho_tilde":
            return d.rho_tilde
        if n == "tau_tilde":
            return d.tau_tilde[:, self.i]
        if n == "d_gamma":
            return d.d_gamma
        if n == "ds_over_dg":
            return d.d_sigma / d.d_gamma
        if n == "x_over_dg2":
            return d.xval / d.d_gamma ** 2
        if n == "ttil_over_dg":
            return d.tau_tilde[:, self.i] / d.d_gamma
        if n == "rho":
            return d.rho
        if n == "x":
            return d.xval
        raise ValueError(f"unknown target {n!r}")

    @property
    def label(self) -> str:
        return self.name + ("" if self.i is None else str(self.i + 1))


def _exact_rule(V: GeneratorVectorField, T: Target, d: DefiningFunctions):
    """Closed-form value of ``V T`` or ``None`` if no rule is tabulated."""
    k, name = V.kind, T.name
    rt, tt, ds, dg, x = d.rho_tilde, d.tau_tilde, d.d_sigma, d.d_gamma, d.xval
    delta = 1.0 if (V.j is not None and V.j == T.i) else 0.0
    if k == "rho_drho":
        if name == "d_sigma":
            return 0.5 * ds * rt
        if name == "rho_tilde":
            return rt - rt ** 2
        if name == "tau_tilde":
            return -0.5 * rt * tt[:, T.i]
    if k == "ds_dtau":
        if name == "d_sigma":
            return ds * tt[:, V.j]
        if name == "rho_tilde":
            return -2.0 * rt * tt[:, V.j]
        if name == "tau_tilde":
            return delta - tt[:, T.i] * tt[:, V.j]
    r = ds / dg
    q = x / dg ** 2
    if k == "ds_dds":
        if name == "d_gamma":
            return dg * r ** 2
        if name == "ds_over_dg":
            return r * (1.0 - r ** 2)
        if name == "x_over_dg2":
            return -2.0 * q * r ** 2
        if name == "ttil_over_dg":
            return -(r ** 2) * tt[:, T.i] / dg
    if k == "dg_dttil":
        tj = tt[:, V.j] / dg
        if name == "d_gamma":
            return tt[:, V.j]
        if name == "ds_over_dg":
            return -r * tj
        if name == "x_over_dg2":
            return -2.0 * q * tj
        if name == "ttil_over_dg":
            return delta - tj * tt[:, T.i] / dg
    if k in ("x_dx", "x_dx2"):
        if name == "d_gamma":
            return x / (2.0 * dg)
        if name == "ds_over_dg":
            return -r * x / (2.0 * dg ** 2)
        if name == "x_over_dg2":
            return q * (1.0 - q)
        if name == "ttil_over_dg":
            return -(tt[:, T.i] / dg) * x / (2.0 * dg ** 2)
    return None


def _first_chart_eval(f: Field, x, y, rho, tau):
    xi, eta = fiber_from_blowup(rho, tau)
    return f(x, y, xi, eta)


def _second_chart_eval(f: Field, x, y, ds, ttil):
    rho, tau = blowup_from_second(ds, ttil)
    return _first_chart_eval(f, x, y, rho, tau)


def _fd(V: GeneratorVectorField, f: Field, x, y, xi, eta, h: float):
    d = defining_functions(x, y, xi, eta)
    rho, tau = d.rho, d.tau
    k = V.kind
    if k in _SECOND_CHART:
        ds, tt = d.d_sigma, d.tau_tilde
        if k == "ds_dds":
            p = _second_chart_eval(f, x, y, ds * np.exp(h), tt)
            m = _second_chart_eval(f, x, y, ds * np.exp(-h), tt)
        elif k == "x_dx2":
            p = _second_chart_eval(f, x * np.exp(h), y, ds, tt)
            m = _second_chart_eval(f, x * np.exp(-h), y, ds, tt)
        else:
            step = h * d.d_gamma
            e = np.zeros_like(tt)
            e[:, V.j] = step
            p = _second_chart_eval(f, x, y, ds, tt + e)
            m = _second_chart_eval(f, x, y, ds, tt - e)
        return (p - m) / (2.0 * h)
    if k == "x_dx":
        p = _first_chart_eval(f, x * np.exp(h), y, rho, tau)
        m = _first_chart_eval(f, x * np.exp(-h), y, rho, tau)
        return (p - m) / (2.0 * h)
    if k == "dy":
        e = np.zeros_like(y)
        e[:, V.j] = h
        return (_first_chart_eval(f, x, y + e, rho, tau)
                - _first_chart_eval(f, x, y - e, rho, tau)) / (2.0 * h)
    if k == "rho_drho":
        p = _first_chart_eval(f, x, y, rho * np.exp(h), tau)
        m = _first_chart_eval(f, x, y, rho * np.exp(-h), tau)
        return (p - m) / (2.0 * h)
    # coefficient * d/dtau_j
    coef = {
        "dgds_dtau": d.d_gamma * d.d_sigma,
        "ds_dtau": d.d_sigma,
        "rho_dtau": rho,
        "sqrtxrho_dtau": np.sqrt(x * rho),
        "tau_dtau": tau[:, V.i] if V.i is not None else None,
    }[k]
    # tau_i d/dtau_j may have a vanishing coefficient; scale the step by a
    # floor and multiply back so the derivative is still well defined.
    scale = np.maximum(np.abs(coef), 1e-3 * d.d_sigma)
    e = np.zeros_like(tau)
    e[:, V.j] = h * scale
    p = _first_chart_eval(f, x, y, rho, tau + e)
    m = _first_chart_eval(f, x, y, rho, tau - e)
    return (p - m) / (2.0 * h) * (coef / scale)


def apply_generator(V: GeneratorVectorField, f, p, *, exact: bool = True,
                    step: float = FD_STEP) -> np.ndarray:
    """Apply a lifted vector field to a scalar field at one or many points.

    Parameters
    ----------
    V : GeneratorVectorField
    f : callable or Target
        Scalar field ``f(x, y, xi, eta)``.  Built-in :class:`Target` fields
        use the closed-form derivative table when ``exact`` is true.
    p : CotangentPoint or tuple of batched arrays ``(x, y, xi, eta)``
    exact : bool
        Use tabulated rules when available.
    step : float
        Relative central-difference step.

    Returns
    -------
    ndarray of shape ``(N,)``.
    """
    pts = _as_batch(p) if isinstance(p, CotangentPoint) else _as_batch(*p)
    if exact and isinstance(f, Target):
        rule = _exact_rule(V, f, defining_functions(*pts))
        if rule is not None:
            return rule
    if np.min(pts[0]) * step < 1e-300:
        warnings.warn("finite-difference step underflows near x = 0", PrecisionWarning)
    return _fd(V, f, *pts, h=step)


# ---------------------------------------------------------------------------
# identity suite

def _identity_table(ntau: int):
    """All (generator, target) pairs with a tabulated closed form."""
    rows = []
    first_targets = [Target("d_sigma"), Target("rho_tilde")] + \
        [Target("tau_tilde", i) for i in range(ntau)]
    for T in first_targets:
        rows.append((GeneratorVectorField("rho_drho"), T))
        for j in range(ntau):
            rows.append((GeneratorVectorField("ds_dtau", j=j), T))
    second_targets = [Target("d_gamma"), Target("ds_over_dg"), Target("x_over_dg2")] + \
        [Target("ttil_over_dg", i) for i in range(ntau)]
    for T in second_targets:
        rows.append((GeneratorVectorField("ds_dds"), T))
        for j in range(ntau):
            rows.append((GeneratorVectorField("dg_dttil", j=j), T))
        rows.append((GeneratorVectorField("x_dx2"), T))
    return rows


def random_cloud(count: int = 1000, n: int = 3, seed: int = 0,
                 x_range=(1e-3, 1.0), ds_range=(1e-3, 0.6), ttil_radius=0.9):
    """Random points near the blown-up corner, sampled in second-chart coordinates."""
    rng = np.random.default_rng(seed)
    x = np.exp(rng.uniform(np.log(x_range[0]), np.log(x_range[1]), count))
    y = rng.uniform(-1.0, 1.0, (count, n - 1))
    ds = np.exp(rng.uniform(np.log(ds_range[0]), np.log(ds_range[1]), count))
    dirs = rng.normal(size=(count, n - 1))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = ttil_radius * rng.uniform(0.0, 1.0, count) ** (1.0 / (n - 1))
    tt = dirs * rad[:, None]
    rho, tau = blowup_from_second(ds, tt)
    xi, eta = fiber_from_blowup(rho, tau)
    return x, y, xi, eta


def lift_identity_suite(count: int = 1000, n: int = 3, seed: int = 0,
                        step: float = FD_STEP, tol: float = 1e-6, points=None):
    """Compare every tabulated lift identity with central differences.

    Returns a list of dicts ``{identity_name, max_residual, points_tested,
    passed}``.  The v2cgen reconstruction identities are appended as well.
    """
    pts = points if points is not None else random_cloud(count, n, seed)
    ntau = pts[3].shape[1]
    report = []
    for V, T in _identity_table(ntau):
        exact = apply_generator(V, T, pts, exact=True)
        fd = apply_generator(V, T, pts, exact=False, step=step)
        res = float(np.max(np.abs(exact - fd)))
        report.append({"identity_name": f"{V.label}({T.label})",
                       "max_residual": res, "points_tested": int(len(pts[0])),
                       "passed": bool(res <= tol)})
    for name, res in v2cgen_residuals(pts, step=step).items():
        report.append({"identity_name": name, "max_residual": res,
                       "points_tested": int(len(pts[0])), "passed": bool(res <= tol)})
    return report


def v2cgen_residuals(pts, step: float = FD_STEP) -> dict:
    """Residuals of the algebraic identities used to re-express d_gamma d_sigma d/dtau.

    * ``d_sigma - rho^{1/2} = |tau|^2 / (d_sigma + rho^{1/2})``
    * ``d_gamma = x^{1/2} + b rho^{1/2} + sum c_i tau_i``
    * ``d_gamma d_sigma = x^{1/2}rho^{1/2} + b rho + sum (c_i rho^{1/2} + d_gamma a_i) tau_i``
    * the same decomposition applied to a test field through the generators.

    The first three are relative residuals, the last an absolute one.
    """
    d = defining_functions(*pts)
    x, rho, tau = d.xval, d.rho, d.tau
    sx, sr = np.sqrt(x), np.sqrt(rho)
    ds, dg, tt = d.d_sigma, d.d_gamma, d.tau_tilde
    tau2 = np.sum(tau ** 2, axis=1)
    out = {}
    lhs = ds - sr
    rhs = tau2 / (ds + sr)
    out["sqrt_rho_gap"] = float(np.max(np.abs(lhs - rhs) / np.maximum(ds, 1e-300)))
    b = sr / (dg + sx)
    c = (1.0 + ds ** 2)[:, None] * tt / (ds * (dg + sx))[:, None]
    a = tau / (ds + sr)[:, None]
    rec = sx + b * sr + np.sum(c * tau, axis=1)
    out["d_gamma_decomposition"] = float(np.max(np.abs(rec - dg) / dg))
    coef = c * sr[:, None] + dg[:, None] * a
    rec2 = sx * sr + b * rho + np.sum(coef * tau, axis=1)
    out["d_gamma_d_sigma_decomposition"] = float(np.max(np.abs(rec2 - dg * ds) / (dg * ds)))

    def test_field(x_, y_, xi_, eta_):
        dd = defining_functions(x_, y_, xi_, eta_)
        return np.sin(3 * dd.tau[:, 0]) + dd.tau[:, -1] ** 2 + dd.rho * dd.tau[:, 0]

    ntau = tau.shape[1]
    worst = 0.0
    for j in range(ntau):
        lhs = apply_generator(GeneratorVectorField("dgds_dtau", j=j), test_field, pts,
                              exact=False, step=step)
        rhs = apply_generator(GeneratorVectorField("sqrtxrho_dtau", j=j), test_field, pts,
                              exact=False, step=step)
        rhs = rhs + b * apply_generator(GeneratorVectorField("rho_dtau", j=j), test_field,
                                        pts, exact=False, step=step)
        for i in range(ntau):
            rhs = rhs + coef[:, i] * apply_generator(
                GeneratorVectorField("tau_dtau", i=i, j=j), test_field, pts,
                exact=False, step=step)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    out["generator_decomposition"] = worst
    return out


def boundary_ratio_profile(V: GeneratorVectorField, b: Target, base, face: str,
                           decades: int = 4, per_decade: int = 4, step: float = FD_STEP):
    """Values of ``(V b)/b`` along a dyadic approach to one boundary face.

    ``base`` is a second-chart point ``(x, y, d_sigma, tau_tilde)`` with
    ``y`` and ``tau_tilde`` one-dimensional arrays; ``face`` is one of
    ``"x"``, ``"d_sigma"``, ``"rho_tilde"`` or ``"d_gamma"``.
    Returns ``(parameter, ratio)`` arrays; boundedness of the ratio is
    the tangency statement.
    """
    x0, y0, ds0, tt0 = base
    tt0 = np.asarray(tt0, dtype=float)
    s = 10.0 ** (-np.arange(decades * per_decade + 1) / per_decade)
    m = len(s)
    y = np.tile(np.asarray(y0, dtype=float), (m, 1))
    if face == "x":
        x, ds, tt = x0 * s, np.full(m, ds0), np.tile(tt0, (m, 1))
    elif face == "d_sigma":
        x, ds, tt = np.full(m, x0), ds0 * s, np.tile(tt0, (m, 1))
    elif face == "rho_tilde":
        u = tt0 / np.linalg.norm(tt0)
        x, ds = np.full(m, x0), np.full(m, ds0)
        tt = np.sqrt(1.0 - s * (1.0 - np.sum(tt0 ** 2)))[:, None] * u[None, :]
    elif face == "d_gamma":
        nrm = np.sqrt(x0 + ds0 ** 2 + np.sum(tt0 ** 2))
        x = x0 * s ** 2 / nrm ** 2
        ds = ds0 * s / nrm
        tt = (tt0 / nrm)[None, :] * s[:, None]
    else:
        raise ValueError(f"unknown face {face!r}")
    rho, tau = blowup_from_second(ds, tt)
    xi, eta = fiber_from_blowup(rho, tau)
    pts = (x, y, xi, eta)
    num = apply_generator(V, b, pts, exact=False, step=step)
    return s, num / b(*pts)


def write_identity_report(report: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity_name", "max_residual", "points_tested"])
        for row in report:
            w.writerow([row["identity_name"], repr(float(row["max_residual"])),
                        row["points_tested"]])


def read_points_csv(path):
    """Read a point cloud written with header ``x,y1,..,xi,eta1,..``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    m = (data.shape[1] - 2) // 2
    return data[:, 0], data[:, 1:1 + m], data[:, 1 + m], data[:, 2 + m:]


def write_points_csv(pts, path) -> None:
    x, y, xi, eta = pts
    m = y.shape[1]
    header = ["x"] + [f"y{i + 1}" for i in range(m)] + ["xi"] + [f"eta{i + 1}" for i in range(m)]
    arr = np.column_stack([x, y, xi, eta])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
