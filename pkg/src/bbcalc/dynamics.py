"""Hamiltonian flows, foliation charts, ray bundles and the conjugated normal operator.

Positions ``q`` and momenta ``p`` are batched arrays of shape ``(N, d)``.
Built-in Hamiltonians are quadratic in the momentum, ``G = p^T M(q) p``, so
velocities and momenta convert through ``M``.

The default geometry is Euclidean space with the paraboloid foliation

    x = c + kappa |z_h|^2 - (z_v + 1),   y = z_h,

whose level sets are strictly convex for straight lines.  A ray through
``(x, y)`` with chart velocity ``(lambda, omega)``, ``|omega| = 1``, is
exactly ``x' = x + lambda t + kappa t^2``, ``y' = y + omega t``, so
``alpha = kappa`` and ``beta = 0``.  Functions of ``(x, y_1)`` alone are
the two-dimensional reduction used downstream; rays still carry
``omega`` on the full circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .quantize import GridSpec, KernelMatrix, chi

__all__ = [
    "Hamiltonian",
    "euclidean",
    "conformal",
    "qsh",
    "flow",
    "ParaboloidChart",
    "convexity_check",
    "RayQuadrature",
    "RayBundle",
    "ray_bundle",
    "TestWeight",
    "ray_transform",
    "gaussian_adjoint",
    "back_projection",
    "conjugated_kernel",
    "decay_lemma_check",
    "normal_operator_matrix",
    "normal_operator_apply",
]


# ---------------------------------------------------------------------------
# Hamiltonians and flows

@dataclass
class Hamiltonian:
    """``G(q, p) = p^T M(q) p`` with ``M`` symmetric positive definite."""

    metric: Callable                      # q (N, d) -> M (N, d, d)
    dmetric: Callable | None = None       # q -> (N, d, d, d), last axis = d/dq_k
    name: str = ""

    def G(self, q, p):
        return np.einsum("ni,nij,nj->n", p, self.metric(q), p)

    def _dM(self, q, h=1e-6):
        if self.dmetric is not None:
            return self.dmetric(q)
        N, d = q.shape
        out = np.empty((N, d, d, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            out[..., k] = (self.metric(q + e) - self.metric(q - e)) / (2 * h)
        return out

    def rhs(self, q, p):
        M = self.metric(q)
        dq = 2 * np.einsum("nij,nj->ni", M, p)
        dp = -np.einsum("ni,nijk,nj->nk", p, self._dM(q), p)
        return dq, dp

    def momentum_from_velocity(self, q, v):
        return 0.5 * np.linalg.solve(self.metric(q), v[..., None])[..., 0]


def euclidean(d: int = 3) -> Hamiltonian:
    return Hamiltonian(lambda q: np.broadcast_to(np.eye(d), (q.shape[0], d, d)).copy(),
                       lambda q: np.zeros((q.shape[0], d, d, d)), "euclidean")


def conformal(phi: Callable, dphi: Callable | None = None, d: int = 3) -> Hamiltonian:
    """``G = exp(-2 phi(q)) |p|^2``: wave speed ``exp(-phi)``."""
    def metric(q):
        return np.exp(-2 * phi(q))[:, None, None] * np.eye(d)[None]

    def dmetric(q):
        g = -2 * np.exp(-2 * phi(q))[:, None] * dphi(q)      # (N, d)
        return np.eye(d)[None, :, :, None] * g[:, None, None, :]
    return Hamiltonian(metric, None if dphi is None else dmetric, "conformal")


def qsh(a55=1.0, a66=1.0, d: int = 3) -> Hamiltonian:
    """``G = a66 |p'|^2 + a55 p_d^2``; coefficients constants or callables of ``q``."""
    def coef(a, q):
        return np.full(q.shape[0], float(a)) if np.isscalar(a) else np.asarray(a(q))

    def metric(q):
        M = np.zeros((q.shape[0], d, d))
        c66, c55 = coef(a66, q), coef(a55, q)
        for i in range(d - 1):
            M[:, i, i] = c66
        M[:, d - 1, d - 1] = c55
        return M

    dm = None
    if np.isscalar(a55) and np.isscalar(a66):
        dm = lambda q: np.zeros((q.shape[0], d, d, d))
    return Hamiltonian(metric, dm, "qsh")


@dataclass
class Trajectory:
    times: np.ndarray
    q: np.ndarray          # (steps+1, N, d)
    p: np.ndarray
    energy_drift: np.ndarray


def flow(H: Hamiltonian, q0, p0, t: float, steps: int = 1000) -> Trajectory:
    """Fixed-step RK4 for Hamilton's equations; reports relative energy drift."""
    q = np.atleast_2d(np.asarray(q0, dtype=float))
    p = np.atleast_2d(np.asarray(p0, dtype=float))
    if np.any(np.linalg.norm(p, axis=1) == 0):
        raise ValueError("flow needs nonzero initial momentum")
    dt = t / steps
    qs, ps = [q], [p]
    E0 = H.G(q, p)
    for k in range(steps):
        k1q, k1p = H.rhs(q, p)
        k2q, k2p = H.rhs(q + 0.5 * dt * k1q, p + 0.5 * dt * k1p)
        k3q, k3p = H.rhs(q + 0.5 * dt * k2q, p + 0.5 * dt * k2p)
        k4q, k4p = H.rhs(q + dt * k3q, p + dt * k3p)
        q = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise FloatingPointError(f"flow diverged at step {k + 1} (t = {(k + 1) * dt:g})")
        qs.append(q)
        ps.append(p)
    drift = np.abs(H.G(q, p) - E0) / E0
    return Trajectory(np.linspace(0, t, steps + 1), np.array(qs), np.array(ps), drift)


# ---------------------------------------------------------------------------
# foliation chart

@dataclass(frozen=True)
class ParaboloidChart:
    """``x = c + kappa |z_h|^2 - (z_v + 1)``, ``y = z_h`` in ``R^dim``.

    The domain is the unit ball; the artificial boundary is ``{x = 0}``.
    """

    kappa: float = 0.25
    c: float = 0.05
    dim: int = 3

    def x_tilde(self, z):
        z = np.atleast_2d(z)
        return self.kappa * np.sum(z[:, :-1] ** 2, axis=1) - (z[:, -1] + 1.0)

    def to_chart(self, z):
        z = np.atleast_2d(z)
        return self.x_tilde(z) + self.c, z[:, :-1].copy()

    def from_chart(self, x, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[0] == 1 and np.ndim(x) and len(x) > 1:
            y = np.repeat(y, len(x), axis=0)
        zv = self.kappa * np.sum(y ** 2, axis=1) - (np.asarray(x) - self.c) - 1.0
        return np.column_stack([y, zv])

    def velocity_to_ambient(self, y, lam, omega):
        """Ambient velocity for chart velocity ``(lambda, omega)`` at tangential ``y``."""
        y = np.atleast_2d(y)
        omega = np.atleast_2d(omega)
        vz = 2 * self.kappa * np.sum(y * omega, axis=1) - np.asarray(lam)
        return np.column_stack([omega, vz])

    def in_domain(self, x, y):
        z = self.from_chart(np.atleast_1d(x), y)
        return (np.asarray(x) > 0) & (np.sum(z ** 2, axis=1) < 1.0)

    def lens_halfwidth(self, x):
        """Half-width in ``y`` of the working region near the pole (|z_h| small)."""
        return np.sqrt(np.maximum(self.c - np.asarray(x), 0) / (0.5 - self.kappa)) \
            if self.kappa < 0.5 else np.inf

    def max_travel_time(self):
        return 2 * float(self.lens_halfwidth(0.0)) + 2 * self.c


def convexity_check(chart: ParaboloidChart, H: Hamiltonian, samples: int = 200, seed: int = 0,
                    h: float = 1e-3, lam_max: float = 0.05, steps: int = 8) -> dict:
    """Second derivative of ``x~`` along glancing rays, and the spread of ``alpha``.

    Glancing rays start tangent to the level set (chart velocity ``(0, omega)``);
    the second derivative is taken by central differences of the flowed
    trajectory.  ``alpha`` is sampled for ``|lambda| <= lam_max`` and must lie
    in ``[C0, 1.01 C0]``.
    """
    rng = np.random.default_rng(seed)
    m = chart.dim - 1
    x = rng.uniform(0.05, 1.0, samples) * chart.c
    y = rng.uniform(-0.5, 0.5, (samples, m)) * float(chart.lens_halfwidth(0.0)) \
        if np.isfinite(chart.lens_halfwidth(0.0)) else rng.uniform(-0.3, 0.3, (samples, m))
    om = rng.normal(size=(samples, m))
    om /= np.linalg.norm(om, axis=1, keepdims=True)

    def xt_along(lam, tt):
        z0 = chart.from_chart(x, y)
        v = chart.velocity_to_ambient(y, lam, om)
        p = H.momentum_from_velocity(z0, v)
        G0 = H.G(z0, p)
        out = [chart.x_tilde(z0)]
        for sgn in (1.0, -1.0):
            tr = flow(H, z0, sgn * p, tt, steps)
            out.append(chart.x_tilde(tr.q[-1]))
        return out, G0

    (x0, xp, xm), G0 = xt_along(np.zeros(samples), h)
    # normalise time so the chart speed in y is one
    second = (xp - 2 * x0 + xm) / h ** 2
    lam = rng.uniform(-lam_max, lam_max, samples)
    (a0, ap, am), _ = xt_along(lam, h)
    alpha = 0.5 * (ap - 2 * a0 + am) / h ** 2
    C0 = float(alpha.min())
    return {
        "min_second_derivative": float(second.min()),
        "convex": bool(second.min() > 0),
        "alpha_min": C0,
        "alpha_max": float(alpha.max()),
        "alpha_within_1pct": bool(alpha.max() <= 1.01 * C0) if C0 > 0 else False,
        "samples": samples,
    }


# ---------------------------------------------------------------------------
# quadrature over rays

@dataclass
class RayQuadrature:
    """Nodes in ``(mu, t_hat, theta)`` with ``lambda_hat = mu - alpha t_hat``.

    ``mu`` carries the Gaussian ``exp(-F mu^2 / (2 alpha))`` after completing the
    square, so Gauss-Legendre on ``|mu| <= mu_max`` is adapted to it;
    ``t_hat`` uses composite Gauss-Legendre panels on ``|t_hat| <= t_max``;
    ``theta`` is uniform.
    """

    mu_max: float
    t_max: float
    n_mu: int = 24
    panels: int = 24
    per_panel: int = 4
    n_theta: int = 64

    @classmethod
    def default(cls, alpha: float = 0.25, F: float = 1.0, **kw):
        kw.setdefault("t_max", math.sqrt(2 * 40.0 / (F * alpha)))
        return cls(mu_max=6.0 * math.sqrt(alpha / F), **kw)

    def __post_init__(self):
        g, w = np.polynomial.legendre.leggauss(self.n_mu)
        self.mu, self.mu_w = g * self.mu_max, w * self.mu_max
        gp, wp = np.polynomial.legendre.leggauss(self.per_panel)
        edges = np.linspace(-self.t_max, self.t_max, self.panels + 1)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        self.t = (mid[:, None] + half[:, None] * gp[None]).ravel()
        self.t_w = (half[:, None] * wp[None]).ravel()
        self.theta = 2 * np.pi * np.arange(self.n_theta) / self.n_theta
        self.theta_w = np.full(self.n_theta, 2 * np.pi / self.n_theta)

    def refine(self):
        """Double the ``mu`` and ``t_hat`` node counts."""
        return RayQuadrature(self.mu_max, self.t_max, 2 * self.n_mu, 2 * self.panels,
                             self.per_panel, self.n_theta)


@dataclass
class TestWeight:
    """``A = scale (omega_1 + s t)^2 (1 + tilt omega_2) psi(t / T) psi(x / 2c)``.

    ``scalar=True`` drops the angular factors.  Called as
    ``A(x, y, lam, omega, t)`` in unscaled variables with ``omega`` of shape
    ``(..., 2)``.
    """

    s: float = 1.0
    T: float = 1.0
    c: float = 0.05
    scale: float = 1.0
    scalar: bool = False
    tilt: float = 0.0

    def __call__(self, x, y, lam, omega, t):
        cut = chi(np.asarray(t) / self.T) * chi(np.asarray(x) / (2 * self.c))
        if self.scalar:
            return self.scale * cut
        ang = (omega[..., 0] + self.s * t) ** 2
        if self.tilt:
            ang = ang * (1.0 + self.tilt * omega[..., 1])
        return self.scale * ang * cut


@dataclass
class RayBundle:
    base: tuple
    lam_hat: np.ndarray
    theta: np.ndarray
    t_hat: np.ndarray
    x_traj: np.ndarray     # (n_lam, n_theta, n_t)
    y_traj: np.ndarray     # (n_lam, n_theta, n_t, dim-1)
    alpha: np.ndarray      # (n_lam, n_theta)
    beta: np.ndarray       # (n_lam, n_theta, dim-1)
    fit_residual: float = 0.0


def _fit_quadratic(t, dev, deg=4):
    """Coefficients of ``t^2 .. t^deg`` fitted to ``dev`` (last axis = t)."""
    V = np.column_stack([t ** k for k in range(2, deg + 1)])
    coef, *_ = np.linalg.lstsq(V, dev.reshape(-1, len(t)).T, rcond=None)
    resid = dev.reshape(-1, len(t)).T - V @ coef
    return coef, resid


def ray_bundle(H: Hamiltonian, chart: ParaboloidChart, base, lam_hat, theta, t_hat,
               steps_per_unit: int = 400) -> RayBundle:
    """Flow rays through ``base = (x, y)`` and fit ``alpha`` and ``beta``.

    Trajectories are integrated with RK4 in ambient coordinates and mapped
    back to the chart; ``alpha`` and ``beta`` are least-squares fits of the
    quadratic terms over the sampled times.
    """
    x0, y0 = base
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    lam_hat = np.atleast_1d(lam_hat)
    theta = np.atleast_1d(theta)
    t_hat = np.sort(np.atleast_1d(t_hat))
    L, Th = np.meshgrid(lam_hat, theta, indexing="ij")
    om = np.stack([np.cos(Th.ravel()), np.sin(Th.ravel())], axis=1)[:, : chart.dim - 1]
    if chart.dim == 2:
        om = np.sign(np.cos(Th.ravel()))[:, None]
    cnt = om.shape[0]
    yb = np.repeat(y0[None, :], cnt, axis=0)
    z0 = chart.from_chart(np.full(cnt, x0), yb)
    v = chart.velocity_to_ambient(yb, x0 * L.ravel(), om)
    p0 = H.momentum_from_velocity(z0, v)
    tt = x0 * t_hat
    xs = np.empty((cnt, len(t_hat)))
    ys = np.empty((cnt, len(t_hat), chart.dim - 1))
    for k, tk in enumerate(tt):
        if tk == 0:
            qk = z0
        else:
            n_k = max(int(math.ceil(steps_per_unit * abs(tk))), 4)
            qk = flow(H, z0, np.sign(tk) * p0, abs(tk), n_k).q[-1]
        xk, yk = chart.to_chart(qk)
        xs[:, k] = xk
        ys[:, k, :] = yk
    lam_full = x0 * L.ravel()
    dx = xs - x0 - lam_full[:, None] * tt[None, :]
    coef, resid = _fit_quadratic(tt, dx)
    alpha = coef[0].reshape(L.shape)
    dy = ys - y0[None, None, :] - om[:, None, :] * tt[None, :, None]
    betas = []
    for j in range(chart.dim - 1):
        cb, _ = _fit_quadratic(tt, dy[..., j])
        betas.append(cb[0].reshape(L.shape))
    beta = np.stack(betas, axis=-1)
    shape = L.shape + (len(t_hat),)
    return RayBundle((x0, y0), lam_hat, theta, t_hat, xs.reshape(shape),
                     ys.reshape(shape + (chart.dim - 1,)), alpha, beta,
                     float(np.max(np.abs(resid))) if resid.size else 0.0)


def exact_rays(chart: ParaboloidChart, x, y, lam_hat, omega, t_hat):
    """Closed-form straight rays in the paraboloid chart (unit ``|omega|``)."""
    X = lam_hat * t_hat + chart.kappa * t_hat ** 2
    return x + x * x * X, y + x * omega * t_hat


# ---------------------------------------------------------------------------
# transforms on the reduced (x, y_1) grid

def _bilinear(grid: GridSpec, f2d, xq, yq):
    """Bilinear samples of a grid function; zero outside the grid."""
    gx, gy = grid.x_nodes, grid.y_nodes
    fx = (xq - gx[0]) / grid.hx
    fy = (yq - gy[0]) / grid.hy
    i0 = np.floor(fx).astype(int)
    j0 = np.floor(fy).astype(int)
    ax, ay = fx - i0, fy - j0
    out = np.zeros(np.shape(xq))
    for di, wi in ((0, 1 - ax), (1, ax)):
        for dj, wj in ((0, 1 - ay), (1, ay)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
            val = np.zeros(np.shape(xq))
            val[ok] = f2d[ii[ok], jj[ok]]
            out += wi * wj * val
    return out


def _gaussian(lam_hat, alpha, F, eps, x, exponent="linear"):
    g = F if exponent == "linear" else F * F
    return chi(x ** eps * lam_hat) * np.exp(-g * lam_hat ** 2 / (2 * alpha))


@dataclass
class RayData:
    base_x: np.ndarray
    base_y: np.ndarray
    lam_hat: np.ndarray
    theta: np.ndarray
    values: np.ndarray      # (n_base, n_lam, n_theta)
    exited: np.ndarray      # bool, same shape

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["base_x", "base_y", "lambda_hat", "omega_angle", "value"])
            for b in range(len(self.base_x)):
                for i, lh in enumerate(self.lam_hat):
                    for k, th in enumerate(self.theta):
                        w.writerow([repr(float(self.base_x[b])), repr(float(self.base_y[b])),
                                    repr(float(lh)), repr(float(th)), repr(float(self.values[b, i, k]))])


def ray_transform(chart: ParaboloidChart, A, f, grid: GridSpec, lam_hat, theta, t_hat, t_w,
                  bases=None) -> RayData:
    """``I[f](base, lam_hat, omega) = int A f(gamma(t)) dt`` along chart rays.

    ``f`` is a grid function (flat or ``(nx, ny)``) on the reduced grid or a
    callable ``f(x, y1)``.  Rays leaving the grid while ``A f`` is still
    nonzero are flagged in ``exited``.
    """
    if bases is None:
        bases = grid.mesh()
    bx, by = (np.asarray(v, dtype=float) for v in bases)
    lam_hat = np.asarray(lam_hat)
    theta = np.asarray(theta)
    om = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    f2d = None if callable(f) else np.asarray(f, dtype=float).reshape(grid.shape)
    vals = np.zeros((len(bx), len(lam_hat), len(theta)))
    exited = np.zeros_like(vals, dtype=bool)
    for b in range(len(bx)):
        x, y = bx[b], by[b]
        L = lam_hat[:, None, None]
        T = np.asarray(t_hat)[None, None, :]
        O1 = om[:, 0][None, :, None]
        xp, yp = exact_rays(chart, x, y, L, O1, T)
        w = A(x, y, x * L, np.broadcast_to(om[None, :, None, :], L.shape[:1] + om.shape[:1] + T.shape[2:] + (2,)),
              x * T)
        fv = f(xp, yp) if f2d is None else _bilinear(grid, f2d, xp, yp)
        integrand = w * fv
        vals[b] = x * np.sum(integrand * np.asarray(t_w)[None, None, :], axis=2)
        outside = (xp < grid.x_nodes[0]) | (xp > grid.x_nodes[-1]) | \
                  (yp < grid.y_nodes[0]) | (yp > grid.y_nodes[-1])
        exited[b] = np.any(outside & (np.abs(w) > 0) & (xp > 0), axis=2) if f2d is not None else False
    return RayData(bx, by, lam_hat, theta, vals, exited)


def gaussian_adjoint(data: RayData, alpha, F: float = 1.0, eps: float = 0.25,
                     lam_w=None, theta_w=None, exponent: str = "linear"):
    """``Lv(x, y) = x^-1 (1/2) int chi(x^eps lam_hat) exp(-F lam_hat^2 / (2 alpha)) v dlam_hat domega``.

    The factor 1/2 counts each unoriented line once.  ``exponent="squared"``
    uses ``F^2`` in the Gaussian instead.
    """
    x = data.base_x
    lam = data.lam_hat
    nl, nt = len(lam), len(data.theta)
    lw = np.full(nl, (lam[1] - lam[0]) if nl > 1 else 1.0) if lam_w is None else np.asarray(lam_w)
    tw = np.full(nt, 2 * np.pi / nt) if theta_w is None else np.asarray(theta_w)
    al = np.broadcast_to(np.asarray(alpha, dtype=float), (len(x), nl, nt)) if np.ndim(alpha) else alpha
    G = _gaussian(lam[None, :, None], al, F, eps, x[:, None, None], exponent)
    acc = np.sum(G * data.values * lw[None, :, None] * tw[None, None, :], axis=(1, 2))
    return 0.5 * acc / x


def back_projection(chart: ParaboloidChart, A, v: RayData, grid: GridSpec, alpha, F, eps,
                    t_hat, t_w, lam_w, theta_w):
    """Transpose of the discrete ray transform for the Gaussian-weighted ray measure.

    Satisfies ``<I f, v>_G = <f, back_projection(v)>`` exactly (up to rounding),
    where ``<.,.>_G`` sums over bases with the scattering measure and over
    ``(lam_hat, theta)`` with ``x^-1 (1/2) chi exp(-F lam_hat^2/(2 alpha))``.
    """
    out = np.zeros(grid.shape)
    mw = grid.measure_weights()
    om = np.stack([np.cos(v.theta), np.sin(v.theta)], axis=1)
    for b in range(len(v.base_x)):
        x, y = v.base_x[b], v.base_y[b]
        L = v.lam_hat[:, None, None]
        T = np.asarray(t_hat)[None, None, :]
        O1 = om[:, 0][None, :, None]
        xp, yp = exact_rays(chart, x, y, L, O1, T)
        w = A(x, y, x * L, np.broadcast_to(om[None, :, None, :], L.shape[:1] + om.shape[:1] + T.shape[2:] + (2,)),
              x * T)
        G = _gaussian(v.lam_hat, alpha, F, eps, x)[:, None, None]
        coef = mw[b] * 0.5 / x * G * lam_w[:, None, None] * theta_w[None, :, None] * \
            v.values[b][:, :, None] * x * w * np.asarray(t_w)[None, None, :]
        _splat(grid, out, xp, yp, coef)
    return out.ravel() / mw


def _splat(grid: GridSpec, out, xq, yq, wts):
    """Bilinear splat (transpose of ``_bilinear``); returns the dropped mass."""
    fx = (xq - grid.x_nodes[0]) / grid.hx
    fy = (yq - grid.y_nodes[0]) / grid.hy
    i0 = np.floor(fx).astype(int).ravel()
    j0 = np.floor(fy).astype(int).ravel()
    ax, ay = (fx.ravel() - i0), (fy.ravel() - j0)
    w = np.broadcast_to(wts, np.shape(xq)).ravel()
    lost = 0.0
    flat = out.reshape(-1)
    for di, wi in ((0, 1 - ax), (1, ax)):
        for dj, wj in ((0, 1 - ay), (1, ay)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
            contrib = wi * wj * w
            flat += np.bincount((ii[ok] * grid.ny + jj[ok]), weights=contrib[ok], minlength=flat.size)
            lost += float(np.abs(contrib[~ok]).sum())
    return lost


# ---------------------------------------------------------------------------
# conjugated kernel

def _kernel_samples(chart: ParaboloidChart, A, F, eps, x, y, quad: RayQuadrature, y_index=0):
    """Weights and ``(X, Y_1)`` of all quadrature nodes for base point ``(x, y)``.

    Weight = (1/2) chi(x^eps lam_hat) exp(-F(lam_hat^2/(2 alpha) + X/(1 + xX))) A dmu dt domega.
    """
    alpha = chart.kappa
    M, T, Th = np.meshgrid(quad.mu, quad.t, quad.theta, indexing="ij")
    W0 = quad.mu_w[:, None, None] * quad.t_w[None, :, None] * quad.theta_w[None, None, :]
    lam = M - alpha * T
    X = M * T
    om = np.stack([np.cos(Th), np.sin(Th)], axis=-1)
    Y = om[..., y_index] * T
    one = 1.0 + x * X
    cut = chi(x ** eps * lam)
    valid = (one > 0) & (cut > 0)
    lhs = np.where(valid, lam ** 2 / (2 * alpha) + X / np.where(valid, one, 1.0), np.inf)
    w = 0.5 * W0 * cut * np.exp(-F * lhs) * A(x, y, x * lam, om, x * T)
    w = np.where(valid, w, 0.0)
    return w, X, Y, lam, T, lhs


def decay_lemma_check(x, lam_hat, t_hat, lhs, C0, weight=None, c1=None) -> dict:
    """Both branches of the exponent lower bound at every contributing node.

    Branch 1 (``|t| <= c2 x^-1/2``): ``lhs >= c1 (lam^2 + t^2)``;
    branch 2: ``lhs >= c1 (lam^2 + |t|)``, with ``c2 = 1/(5 sqrt(C0))``.
    ``c1`` is fitted as the smallest ratio when not supplied.
    """
    c2 = 1.0 / (5.0 * math.sqrt(C0))
    on = np.ones_like(lhs, dtype=bool) if weight is None else (weight != 0)
    near = np.abs(t_hat) <= c2 / math.sqrt(x)
    r1 = lhs / np.maximum(lam_hat ** 2 + t_hat ** 2, 1e-300)
    r2 = lhs / np.maximum(lam_hat ** 2 + np.abs(t_hat), 1e-300)
    sel1, sel2 = on & near, on & ~near
    # the origin itself is excluded: both sides vanish there
    sel1 &= (lam_hat ** 2 + t_hat ** 2) > 1e-12
    m1 = float(r1[sel1].min()) if sel1.any() else float("inf")
    m2 = float(r2[sel2].min()) if sel2.any() else float("inf")
    fit1 = m1 if c1 is None else c1[0]
    fit2 = m2 if c1 is None else c1[1]
    ok1 = r1[sel1] >= fit1 * (1 - 1e-12)
    ok2 = r2[sel2] >= fit2 * (1 - 1e-12)
    total = int(sel1.sum() + sel2.sum())
    return {
        "c1_branch_small_t": m1,
        "c1_branch_large_t": m2,
        "c2": c2,
        "nodes": total,
        "fraction_satisfied": float((ok1.sum() + ok2.sum()) / total) if total else 1.0,
        "holds": bool(ok1.all() and ok2.all() and fit1 > 0 and fit2 > 0),
    }


@dataclass
class BinnedKernel:
    x: float
    y: float
    X_centers: np.ndarray
    Y_centers: np.ndarray
    values: np.ndarray          # density on bins
    mass: float
    dropped: float
    decay: dict = field(default_factory=dict)


def conjugated_kernel(chart: ParaboloidChart, A, F: float, base, X_range, Y_range, bins,
                      quad: RayQuadrature | None = None, eps: float = 0.25) -> BinnedKernel:
    """Tent-splat the conjugated kernel ``K_F(x, y, X, Y_1)`` onto uniform bins.

    ``bins = (nX, nY)``.  The decay lemma is checked at every node with
    nonzero weight.
    """
    x, y = base
    quad = RayQuadrature.default(chart.kappa, F) if quad is None else quad
    w, X, Y, lam, T, lhs = _kernel_samples(chart, A, F, eps, x, y, quad)
    nX, nY = bins
    Xc = np.linspace(X_range[0], X_range[1], nX)
    Yc = np.linspace(Y_range[0], Y_range[1], nY)
    hX, hY = Xc[1] - Xc[0], Yc[1] - Yc[0]
    g = GridSpec(Xc - X_range[0] + 1.0, Yc)        # shifted copy: only spacing matters
    out = np.zeros((nX, nY))
    dropped = _splat(g, out, X - X_range[0] + 1.0, Y, w)
    dec = decay_lemma_check(x, lam, T, lhs, chart.kappa, weight=w)
    return BinnedKernel(x, y, Xc, Yc, out / (hX * hY), float(w.sum()), dropped, dec)


# ---------------------------------------------------------------------------
# dense normal operator on the reduced grid

def _arcsine_moments(c, jmax: int, kmax: int):
    """``I[t, k, j] = int_{-1}^{1} u^k hat(c_t u - j) du / sqrt(1 - u^2)`` for ``j = -jmax..jmax``.

    ``hat`` is the unit tent; the antiderivatives of ``u^k / sqrt(1 - u^2)``
    make this exact.
    """
    ac = np.maximum(np.abs(c), 1e-300)[:, None, None]
    j = np.arange(-jmax, jmax + 1)[None, None, :].astype(float)
    ua, ub, ue = (np.clip((j + d) / ac, -1.0, 1.0) for d in (-1.0, 0.0, 1.0))

    def antider(u):
        s = np.sqrt(np.maximum(1.0 - u * u, 0.0))
        out = [np.arcsin(u), -s]
        for k in range(2, kmax + 2):
            out.append((-u ** (k - 1) * s + (k - 1) * out[k - 2]) / k)
        return out

    Ja, Jb, Je = antider(ua), antider(ub), antider(ue)
    I = np.empty((len(c), kmax + 1, 2 * jmax + 1))
    for k in range(kmax + 1):
        rise = ac * (Jb[k + 1] - Ja[k + 1]) - (j - 1) * (Jb[k] - Ja[k])
        fall = (j + 1) * (Je[k] - Jb[k]) - ac * (Je[k + 1] - Jb[k + 1])
        mk = (rise + fall)[:, 0, :]
        if k % 2:
            mk = np.where((np.asarray(c) < 0)[:, None], -mk, mk)
        I[:, k, :] = mk
    return I


def _angular_nodes(x, grid: GridSpec, alpha, F, target: float = 0.3):
    """``(mu, t_hat)`` nodes fine enough that neighbouring nodes land within ``target`` cells."""
    mu_max = 6.0 * math.sqrt(alpha / F)
    t_max = 6.0 / math.sqrt(F * alpha)
    t_eff = 4.0 / math.sqrt(F * alpha)
    fx, fy = x * x / grid.hx, x / grid.hy
    n_mu = int(np.clip(math.ceil(2 * mu_max * t_eff * fx / target), 24, 2048))
    dt = target / max(fy, mu_max * fx, 1e-12)
    panels = int(np.clip(math.ceil(2 * t_max / (4 * dt)), 24, 1024))
    return RayQuadrature(mu_max, t_max, n_mu=n_mu, panels=panels, per_panel=4, n_theta=1)


def _stencil_exact(grid: GridSpec, chart: ParaboloidChart, A, F, eps, x, quad, conjugate, degree):
    """Row stencil with the ray angle integrated in closed form.

    In the reduced geometry a node ``(mu, t_hat)`` lands at ``X = mu t_hat``
    and ``Y = t_hat cos(theta)``, so only the even part of ``A`` in the angle
    matters; it is interpolated by a polynomial in ``cos(theta)`` and the tent
    weights are integrated against the arcsine density exactly.
    """
    alpha = chart.kappa
    quad = _angular_nodes(x, grid, alpha, F) if quad is None else quad
    M, T = np.meshgrid(quad.mu, quad.t, indexing="ij")
    lam, X = M - alpha * T, M * T
    one = 1.0 + x * X
    cut = chi(x ** eps * lam)
    valid = (one > 0) & (cut > 0)
    lhs = np.where(valid, lam ** 2 / (2 * alpha) + X / np.where(valid, one, 1.0), np.inf)
    W = 0.5 * quad.mu_w[:, None] * quad.t_w[None, :] * cut * np.exp(-F * lhs)
    if not conjugate:
        W = W * np.exp(F * X / np.where(valid, one, 1.0))
    W = np.where(valid, W, 0.0)

    # even part of A as a polynomial in u = cos(theta)
    K = degree + 1
    u_nodes = np.cos(np.pi * (np.arange(K) + 0.5) / K)
    u_check = np.array([0.93, -0.41])
    u_all = np.concatenate([u_nodes, u_check])
    th = np.arccos(u_all)
    vals = 0.0
    for sgn in (1.0, -1.0):
        om = np.stack([np.cos(th), sgn * np.sin(th)], axis=-1)
        vals = vals + 0.5 * A(x, 0.0, x * lam[..., None], om, x * T[..., None])
    vals = np.broadcast_to(vals, lam.shape + (len(u_all),))
    coef = np.linalg.solve(np.vander(u_nodes, K, increasing=True), vals[..., :K].reshape(-1, K).T)
    coef = coef.T.reshape(lam.shape + (K,))
    fit = coef @ np.vander(u_check, K, increasing=True).T
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    resid = float(np.max(np.abs((fit - vals[..., K:]) * (W[..., None] != 0)))) / scale
    if resid > 1e-6:
        raise ValueError(f"weight is not a degree-{degree} polynomial in the ray angle "
                         f"(residual {resid:.1e}); raise degree or use angular='nodes'")

    b = W[..., None] * coef                                   # (n_mu, n_t, K)
    c = x * quad.t / grid.hy
    jmax = int(math.ceil(np.max(np.abs(c)))) + 1
    mom = 2.0 * _arcsine_moments(c, jmax, degree)             # (n_t, K, J); 2: both angle branches
    nx = grid.nx
    fx = (x + x * x * X - grid.x_nodes[0]) / grid.hx
    i0 = np.floor(fx).astype(int)
    ax = fx - i0
    tidx = np.broadcast_to(np.arange(len(quad.t))[None, :], i0.shape)
    # total angular mass per node, for the lost-mass tally
    even = np.array([np.pi * math.prod(range(k - 1, 0, -2)) / max(math.prod(range(k, 0, -2)), 1)
                     if k % 2 == 0 else 0.0 for k in range(K)])
    node_mass = np.abs(2.0 * (b @ even))
    C = np.zeros(len(quad.t) * nx * K)
    lost = 0.0
    for di, wi in ((0, 1 - ax), (1, ax)):
        ii = i0 + di
        ok = (ii >= 0) & (ii < nx)
        idx = ((tidx[ok] * nx + ii[ok])[:, None] * K + np.arange(K)[None, :]).ravel()
        C += np.bincount(idx, weights=(wi[ok][:, None] * b[ok]).ravel(), minlength=C.size)
        lost += float(np.sum(wi[~ok] * node_mass[~ok]))
    C = C.reshape(len(quad.t), nx, K)
    stencil = np.einsum("tik,tkj->ij", C, mom, optimize=True)
    report = dict(lam=lam, T=T, lhs=lhs, weight=W, angular_residual=resid)
    return stencil, -jmax, float(node_mass.sum()), lost, report


def _stencil_nodes(grid: GridSpec, chart: ParaboloidChart, A, F, eps, x, quad, conjugate):
    """Row stencil by bilinear splatting of every ``(mu, t_hat, theta)`` node."""
    quad = RayQuadrature.default(chart.kappa, F) if quad is None else quad
    nx = grid.nx
    w, X, Y, lam, T, lhs = _kernel_samples(chart, A, F, eps, x, 0.0, quad)
    if not conjugate:
        # undo the conjugation factor exp(F (1/x' - 1/x)) = exp(-F X/(1+xX))
        w = w * np.exp(F * X / np.maximum(1.0 + x * X, 1e-300))
    fx = (x + x * x * X - grid.x_nodes[0]) / grid.hx
    i0 = np.floor(fx).astype(int).ravel()
    ax = fx.ravel() - i0
    fy = (x * Y).ravel() / grid.hy
    j0 = np.floor(fy).astype(int).ravel()
    ay = fy - j0
    wv = w.ravel()
    jmin, jmax = int(j0.min()), int(j0.max()) + 1
    noff = jmax - jmin + 1
    stencil = np.zeros((nx, noff))
    lost = 0.0
    for di, wi in ((0, 1 - ax), (1, ax)):
        for dj, wj in ((0, 1 - ay), (1, ay)):
            ii, jj = i0 + di, j0 + dj - jmin
            ok = (ii >= 0) & (ii < nx)
            c = wi * wj * wv
            stencil += np.bincount(ii[ok] * noff + jj[ok], weights=c[ok],
                                   minlength=nx * noff).reshape(nx, noff)
            lost += float(np.abs(c[~ok]).sum())
    report = dict(lam=lam, T=T, lhs=lhs, weight=w)
    return stencil, jmin, float(np.abs(wv).sum()), lost, report


def normal_operator_matrix(grid: GridSpec, chart: ParaboloidChart, A, F: float = 1.0,
                           eps: float = 0.25, quad: RayQuadrature | None = None,
                           conjugate: bool = True, decay: list | None = None,
                           angular: str = "exact", degree: int = 4) -> KernelMatrix:
    """Dense ``N_F`` (or ``N`` with ``conjugate=False``) by bilinear splatting onto the grid.

    The geometry is invariant under ``y`` translations, so one stencil per
    ``x`` row is computed and shifted along ``y``.  ``angular="exact"``
    integrates the ray angle in closed form (``A`` must be a polynomial of
    degree ``<= degree`` in ``cos(theta)`` after averaging over ``+-theta``)
    with ``(mu, t_hat)`` nodes sized to the grid when ``quad`` is None;
    ``angular="nodes"`` splats every quadrature node.  Sampled node clouds
    alias badly at grid scale, which ruins any inverse of the matrix, so
    ``"exact"`` is the default.  Mass falling outside the grid is tallied;
    decay-lemma reports are appended to ``decay``.
    """
    nx, ny = grid.shape
    E = np.zeros((grid.size, grid.size))
    lost = total = 0.0
    resid = 0.0
    for ix, x in enumerate(grid.x_nodes):
        if angular == "exact":
            stencil, jmin, mass, row_lost, rep = _stencil_exact(grid, chart, A, F, eps, x, quad,
                                                                 conjugate, degree)
            resid = max(resid, rep["angular_residual"])
        elif angular == "nodes":
            stencil, jmin, mass, row_lost, rep = _stencil_nodes(grid, chart, A, F, eps, x, quad,
                                                                 conjugate)
        else:
            raise ValueError(f"unknown angular mode {angular!r}")
        if decay is not None:
            decay.append(decay_lemma_check(x, rep["lam"], rep["T"], rep["lhs"], chart.kappa,
                                           weight=rep["weight"]))
        lost += row_lost * ny
        total += mass * ny
        offs = np.arange(jmin, jmin + stencil.shape[1])
        for iy in range(ny):
            tgt = iy + offs
            ok = (tgt >= 0) & (tgt < ny)
            lost += float(np.abs(stencil[:, ~ok]).sum())
            cols = (np.arange(nx)[:, None] * ny + tgt[None, ok]).ravel()
            E[ix * ny + iy, cols] = stencil[:, ok].ravel()
    meta = {"F": F, "conjugated": conjugate, "angular": angular}
    if angular == "exact":
        meta["angular_residual"] = resid
    return KernelMatrix(grid, E, lost, total, meta)


def normal_operator_apply(grid: GridSpec, chart: ParaboloidChart, A, f: Callable, F: float = 1.0,
                          eps: float = 0.25, quad: RayQuadrature | None = None,
                          conjugate: bool = True):
    """Direct ray quadrature of ``N_F f`` at the grid nodes for a callable ``f(x, y1)``."""
    quad = RayQuadrature.default(chart.kappa, F) if quad is None else quad
    xs, ys = grid.mesh()
    out = np.empty(grid.size)
    for ix, x in enumerate(grid.x_nodes):
        w, X, Y, lam, T, lhs = _kernel_samples(chart, A, F, eps, x, 0.0, quad)
        if not conjugate:
            w = w * np.exp(F * X / np.maximum(1.0 + x * X, 1e-300))
        xp = x + x * x * X
        for iy, y in enumerate(grid.y_nodes):
            out[ix * grid.ny + iy] = float(np.sum(w * f(xp, y + x * Y)))
    return out
