"""Numeric symbols of the conjugated normal operator and their predicted structure.

Symbols use the convention of :mod:`bbcalc.quantize`: ``a = int exp(-i(xi X + eta Y)) K dX dY``.
With that sign the imaginary subprincipal term carries a factor ``-i``.

Three ways to evaluate the symbol at a point ``x``:

* :func:`numeric_symbol` -- discrete Fourier transform of a binned kernel
  (low frequencies, aliasing detected by a windowed comparison);
* :func:`direct_symbol` -- sum over the ray quadrature nodes;
* :func:`ray_symbol` -- fast path for large frequencies.  The ray angle is
  integrated exactly mode by mode with Bessel functions,
  ``int exp(-i z cos th) e^{i m th} dth = 2 pi (-i)^m J_m(z)``, and the
  remaining ``(mu, t_hat)`` integral uses Gauss-Legendre panels matched to
  the oscillation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .dynamics import BinnedKernel, ParaboloidChart, RayQuadrature, _kernel_samples
from .quantize import chi
from .symbols import near_sigma_samples, structural_ellipticity_check

__all__ = [
    "SymbolProbe",
    "numeric_symbol",
    "direct_symbol",
    "ray_symbol",
    "gaussian_moment",
    "finite_point_symbol",
    "predicted_subprincipal",
    "predicted_third_order",
    "fit_direction",
    "symbol_structure_report",
    "write_probe_csv",
    "write_fit_csv",
]


@dataclass
class SymbolProbe:
    x: float
    y: float
    xi: np.ndarray
    eta: np.ndarray
    values: np.ndarray
    fits: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# symbol evaluation

def numeric_symbol(kernel: BinnedKernel, xi, eta, tol: float = 0.01) -> SymbolProbe:
    """DFT of a binned kernel; flags aliasing when a Hann-windowed transform disagrees by more than ``tol``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    X, Y = kernel.X_centers, kernel.Y_centers
    hX, hY = X[1] - X[0], Y[1] - Y[0]
    ex = np.exp(-1j * xi[:, None] * X[None, :])
    ey = np.exp(-1j * eta[:, None] * Y[None, :])
    vals = np.einsum("ki,ij,kj->k", ex, kernel.values, ey) * hX * hY
    wx = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(len(X)) / (len(X) - 1))
    wy = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(len(Y)) / (len(Y) - 1))
    win = np.einsum("ki,ij,kj->k", ex, kernel.values * np.outer(wx, wy), ey) * hX * hY
    probe = SymbolProbe(kernel.x, kernel.y, xi, eta, vals)
    scale = np.max(np.abs(vals)) if vals.size else 1.0
    if np.max(np.abs(vals - win)) > tol * scale:
        probe.flags.append("bin aliasing: windowed and unwindowed transforms disagree")
    return probe


def direct_symbol(chart: ParaboloidChart, A, F: float, x: float, y: float, xi, eta,
                  quad: RayQuadrature | None = None, eps: float = 0.25) -> SymbolProbe:
    """Sum ``w exp(-i(xi X + eta Y_1))`` over all ray quadrature nodes (moderate frequencies)."""
    quad = RayQuadrature.default(chart.kappa, F) if quad is None else quad
    w, X, Y, *_ = _kernel_samples(chart, A, F, eps, x, y, quad)
    keep = w != 0
    w, X, Y = w[keep], X[keep], Y[keep]
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    vals = np.array([np.sum(w * np.exp(-1j * (a * X + b * Y))) for a, b in zip(xi, eta)])
    return SymbolProbe(x, y, xi, eta, vals)


def _panels(t_max, length, per_panel):
    n = max(int(math.ceil(t_max / length)), 1)
    g, w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.linspace(0.0, t_max, n + 1)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    t = (mid[:, None] + half[:, None] * g[None]).ravel()
    tw = (half[:, None] * w[None]).ravel()
    return np.concatenate([-t[::-1], t]), np.concatenate([tw[::-1], tw])


def ray_symbol(chart: ParaboloidChart, A, F: float, x: float, y: float, xi, eta, eps: float = 0.25,
               n_mu: int = 64, n_theta: int = 16, t_max: float | None = None, per_panel: int = 8,
               chunk: int = 4096, s_cut: float = 14.0) -> SymbolProbe:
    """Symbol at large frequencies by mode-wise exact angular integration.

    ``A`` must be band-limited in the ray angle to ``n_theta / 2`` modes; the
    energy in the top modes is reported in ``fits["angular_tail"]``.
    """
    alpha = chart.kappa
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    mu_max = 6.0 * math.sqrt(alpha / F)
    if t_max is None:
        t_max = math.sqrt(2 * 40.0 / (F * alpha))
    rmax = max(float(np.max(np.abs(eta))), float(np.max(np.abs(xi))) * mu_max, 1.0)
    t_all, tw_all = _panels(t_max, min(0.25, 1.0 / rmax), per_panel)
    g, gw = np.polynomial.legendre.leggauss(n_mu)
    mu, mw = g * mu_max, gw * mu_max
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    om = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    modes = np.fft.fftfreq(n_theta, 1.0 / n_theta).astype(int)
    phase_m = 2 * np.pi * (-1j) ** modes
    acc = np.zeros(len(xi), dtype=complex)
    tail = 0.0
    total = 0.0
    for s in range(0, len(t_all), chunk):
        t = t_all[s:s + chunk]
        tw = tw_all[s:s + chunk]
        M, T = np.meshgrid(mu, t, indexing="ij")
        lam = M - alpha * T
        X = M * T
        one = 1.0 + x * X
        cut = chi(x ** eps * lam)
        ok = (one > 0) & (cut > 0)
        lhs = np.where(ok, lam ** 2 / (2 * alpha) + X / np.where(ok, one, 1.0), np.inf)
        base = 0.5 * np.where(ok, cut * np.exp(-F * lhs), 0.0)
        Av = A(x, y, x * lam[..., None], np.broadcast_to(om, lam.shape + om.shape), x * T[..., None])
        Am = np.fft.fft(Av, axis=-1) / n_theta                     # (n_mu, n_t, modes)
        gm = base[..., None] * Am
        top = np.abs(modes) >= n_theta // 4
        tail += float(np.sum(np.abs(gm[..., top]) ** 2))
        total += float(np.sum(np.abs(gm) ** 2))
        for k, (a, b) in enumerate(zip(xi, eta)):
            s_arg = a * t
            use = np.abs(s_arg) <= s_cut / math.sqrt(alpha / F)
            if not use.any():
                continue
            e = np.exp(-1j * np.outer(mu, s_arg[use]))               # (n_mu, n_t')
            inner = np.einsum("j,jt,jtm->tm", mw, e, gm[:, use, :])   # (n_t', modes)
            J = special.jv(modes[None, :], b * t[use][:, None])
            acc[k] += np.sum(tw[use][:, None] * inner * J * phase_m[None, :])
    probe = SymbolProbe(x, y, xi, eta, acc)
    probe.fits["angular_tail"] = math.sqrt(tail / total) if total > 0 else 0.0
    return probe


# ---------------------------------------------------------------------------
# closed forms

def gaussian_moment(alpha: float, F: float) -> tuple:
    """``int (2 F alpha - F^2 lam^2) exp(-F lam^2/(2 alpha)) dlam`` by quadrature and in closed form."""
    f = lambda l: (2 * F * alpha - F * F * l * l) * math.exp(-F * l * l / (2 * alpha))
    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    return val, math.sqrt(2 * math.pi) * alpha ** 1.5 * math.sqrt(F)


def _circle(n_theta):
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    return np.stack([np.cos(th), np.sin(th)], axis=-1), 2 * np.pi / n_theta


def finite_point_symbol(A, alpha: float, F: float, xi, eta, y: float = 0.0, n_theta: int = 512,
                        normalization: str = "kernel"):
    """Symbol at ``x = 0`` in closed form, integrated over the circle of ray directions.

    ``normalization="kernel"`` matches the assembled kernel (each unoriented
    line counted once):

        pi / sqrt(xi^2 + F^2) * int exp(-F (eta.omega)^2 / (2 alpha (xi^2 + F^2))) A domega.

    ``normalization="display"`` evaluates the literal variant
    ``pi sqrt(F/(xi^2+F^2)) sqrt(alpha/F) int exp(-F (eta.omega)^2/(alpha (xi^2+F^2))) A domega``;
    the two agree when ``alpha = 1`` and ``eta = 0``.
    """
    om, dw = _circle(n_theta)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.asarray(eta, dtype=float)
    eta2 = np.zeros((len(xi), 2))
    if eta.ndim == 0 or (eta.ndim == 1 and len(xi) > 1 and eta.shape[0] == len(xi)):
        eta2[:, 0] = np.broadcast_to(eta, xi.shape)
    else:
        eta2[:] = np.broadcast_to(eta, (len(xi), 2))
    Av = A(0.0, y, 0.0, om, np.zeros(n_theta))
    q = xi ** 2 + F ** 2
    proj = (eta2 @ om.T) ** 2                                        # (k, n_theta)
    if normalization == "kernel":
        g = np.exp(-F * proj / (2 * alpha * q[:, None]))
        out = math.pi / np.sqrt(q) * (g @ Av) * dw
    elif normalization == "display":
        g = np.exp(-F * proj / (alpha * q[:, None]))
        out = math.pi * np.sqrt(F / q) * math.sqrt(alpha / F) * (g @ Av) * dw
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return out if out.size > 1 else float(out[0])


def _perp_derivatives(A, x, y, lam, t_step, w_step, direction=(1.0, 0.0)):
    """``d_t d_w A`` and ``d_w^2 A`` at both perpendicular directions (``t = 0``).

    ``w`` moves ``omega`` toward ``direction`` along the circle.
    """
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    perps = [np.array([-e[1], e[0]]), np.array([e[1], -e[0]])]
    out = []
    lam = np.atleast_1d(lam)
    for p in perps:
        def Aw(w, t):
            v = p + w * e
            v = v / np.linalg.norm(v)
            return A(x, y, lam, np.broadcast_to(v, lam.shape + (2,)), np.full(lam.shape, t))
        h, k = w_step, t_step
        mixed = (Aw(h, k) - Aw(h, -k) - Aw(-h, k) + Aw(-h, -k)) / (4 * h * k)
        second = (Aw(h, 0.0) - 2 * Aw(0.0, 0.0) + Aw(-h, 0.0)) / (h * h)
        out.append((mixed, second))
    return out


def predicted_subprincipal(A, alpha: float, beta: float, x: float, y: float = 0.0, F: float = 1.0,
                           eps: float = 0.25, direction=(1.0, 0.0), n_lam: int = 201,
                           normalization: str = "kernel") -> dict:
    """Imaginary subprincipal coefficient ``Im(a) r^2`` on the degenerate set at height ``x``.

    ``"kernel"``: ``-pi x sum_perp int chi(x^eps l) exp(-F l^2/(2 alpha)) (d_t d_w - beta d_w^2) A dl``
    (real number returned; the symbol term is ``i`` times it).
    ``"display"``: ``x sum_perp int chi(x^eps l) (d_t d_w - beta d_w^2) A dl`` without the Gaussian.
    Derivatives are central differences at two step sizes; disagreement beyond
    1e-4 relative is flagged.
    """
    lam_max = 6 * math.sqrt(alpha / F)
    l = np.linspace(-lam_max, lam_max, n_lam)
    wq = np.full(n_lam, l[1] - l[0])
    wq[[0, -1]] *= 0.5
    vals = []
    for hs in (1e-3, 5e-4):
        tot = 0.0
        for mixed, second in _perp_derivatives(A, x, y, x * l, hs, hs, direction):
            integrand = chi(x ** eps * l) * (mixed - beta * second)
            if normalization == "kernel":
                integrand = integrand * np.exp(-F * l * l / (2 * alpha))
            tot += float(np.sum(wq * integrand))
        vals.append(tot)
    pref = -math.pi * x if normalization == "kernel" else x
    v1, v2 = pref * vals[0], pref * vals[1]
    noisy = abs(v1 - v2) > 1e-4 * max(abs(v2), 1e-300)
    return {"value": v2, "derivative_noise": noisy, "coarse": v1}


def predicted_third_order(A, alpha: float, y: float = 0.0, F: float = 1.0, direction=(1.0, 0.0),
                          normalization: str = "kernel") -> float:
    """Third-order coefficient on the degenerate set at ``x = 0``.

    ``"kernel"``: ``pi sqrt(pi F / 2) sum_perp alpha^{3/2} d_w^2 A(0, y, 0, perp, 0)``;
    ``"display"``: ``sqrt(pi F)/2 sum_perp alpha^{3/2} d_w^2 A``.
    Raises if the second derivative is not positive at both directions.
    """
    parts = [float(second[0]) for _, second in
             _perp_derivatives(A, 0.0, y, 0.0, 1e-4, 1e-4, direction)]
    if min(parts) <= 0:
        raise ValueError(f"second angular derivative not positive: {parts}")
    pref = math.pi * math.sqrt(math.pi * F / 2) if normalization == "kernel" else math.sqrt(math.pi * F) / 2
    return pref * alpha ** 1.5 * sum(parts)


# ---------------------------------------------------------------------------
# fits and verdicts

def fit_direction(r, values, odd_terms: int = 3, even_terms: int = 3):
    """Separate real/imaginary fits along one direction.

    ``Re a = sum_k c_k rho^(2k+1)``, ``Im a = sum_k d_k rho^(2k+2)`` with
    ``rho = (1 + r^2)^-1/2``, least squares weighted by ``rho^-1`` and
    ``rho^-2`` so every node counts on the scale of the leading term.
    Returns ``(a1, a2, a3, resid)`` where ``resid`` is the worst relative
    residual of the two fits.
    """
    r = np.asarray(r, dtype=float)
    rho = 1.0 / np.sqrt(1.0 + r * r)
    re, im = np.real(values), np.imag(values)
    Vr = np.column_stack([rho ** (2 * k + 1) for k in range(odd_terms)]) / rho[:, None]
    Vi = np.column_stack([rho ** (2 * k + 2) for k in range(even_terms)]) / rho[:, None] ** 2
    cr, *_ = np.linalg.lstsq(Vr, re / rho, rcond=None)
    ci, *_ = np.linalg.lstsq(Vi, im / rho ** 2, rcond=None)
    rr = np.max(np.abs(Vr @ cr - re / rho)) / max(np.max(np.abs(re / rho)), 1e-300)
    ri = np.max(np.abs(Vi @ ci - im / rho ** 2)) / max(np.max(np.abs(im / rho ** 2)), 1e-300)
    return float(cr[0]), float(ci[0]), float(cr[1]) if odd_terms > 1 else 0.0, float(max(rr, ri))


def _slope(x, y):
    p = np.polyfit(np.log(x), np.log(y), 1)
    return float(p[0])


def symbol_structure_report(chart: ParaboloidChart, A, F: float = 1.0, xs=(0.0125, 0.025, 0.05, 0.1),
                            angles=(0.1, 0.15, 0.2, 0.3, 0.45, 0.7, 1.0, 1.5707963267948966),
                            r_sigma=None, eps: float = 0.25, probes: list | None = None,
                            tol_sub: float = 0.15, tol_third: float = 0.2) -> dict:
    """Fit ``a ~ a_{-1} rho + i x a~ rho^2 + a_{-3} rho^3`` and return the four verdicts.

    Angles are measured from the degenerate set (``xi = 0``) toward ``xi``;
    the leading coefficient is fitted on each angle at the smallest ``x`` and
    its vanishing rate in ``tau = sin(angle)`` is the log-log slope over the
    four smallest angles.  The on-set fits use ``r_sigma`` frequencies.
    """
    alpha = chart.kappa
    xs = sorted(xs)
    if r_sigma is None:
        r_sigma = np.geomspace(8.0, 120.0, 14)
    res = {"x": list(xs)}
    sig_fits = []
    for x in xs:
        pr = ray_symbol(chart, A, F, x, 0.0, np.zeros_like(r_sigma), r_sigma, eps=eps)
        a1, a2, a3, resid = fit_direction(r_sigma, pr.values)
        pr.fits.update({"a1": a1, "a2": a2, "a3": a3, "resid": resid, "direction": "sigma"})
        sig_fits.append(pr.fits)
        if probes is not None:
            probes.append(pr)
    # (ii) subprincipal
    pred = [predicted_subprincipal(A, alpha, 0.0, x, 0.0, F, eps)["value"] for x in xs]
    got = [f["a2"] for f in sig_fits]
    rel = [abs(g - p) / abs(p) for g, p in zip(got, pred)]
    lin = _slope(xs, np.abs(got))
    res["subprincipal"] = {"fitted": got, "predicted": pred, "relative_error": rel,
                           "x_exponent": lin,
                           "pass": bool(max(rel) <= tol_sub and abs(lin - 1) <= 0.2)}
    # (iii) third order at the smallest x
    p3 = predicted_third_order(A, alpha, 0.0, F)
    # the leading term vanishes on the set, so the rho^3 coefficient is the third-order term
    g3 = sig_fits[0]["a3"]
    res["third_order"] = {"fitted": g3, "predicted": p3, "relative_error": abs(g3 - p3) / abs(p3),
                          "leading_on_sigma": sig_fits[0]["a1"],
                          "pass": bool(abs(g3 - p3) <= tol_third * abs(p3))}
    # (i) leading coefficient by angle at the smallest x
    x0 = xs[0]
    lead = []
    for ang in angles:
        rmin = max(8.0, 4.0 / math.sin(ang))
        rr = np.geomspace(rmin, 12 * rmin, 14)
        pr = ray_symbol(chart, A, F, x0, 0.0, rr * math.sin(ang), rr * math.cos(ang), eps=eps)
        a1, a2, a3, resid = fit_direction(rr, pr.values)
        pr.fits.update({"a1": a1, "a2": a2, "a3": a3, "resid": resid, "direction": f"angle={ang:.6g}"})
        lead.append(pr.fits)
        if probes is not None:
            probes.append(pr)
    a1s = np.array([f["a1"] for f in lead])
    taus = np.sin(np.asarray(angles))
    small = np.argsort(taus)[:4]
    expo = _slope(taus[small], np.abs(a1s[small]))
    res["leading"] = {"angles": list(angles), "a1": a1s.tolist(), "tau_exponent": expo,
                      "a1_on_sigma": sig_fits[0]["a1"],
                      "pass": bool(np.all(a1s > 0) and abs(expo - 2) <= 0.3)}
    # (iv) structural ellipticity with the fitted coefficients
    q = float(np.median(a1s[small] / taus[small] ** 2))
    xa = np.asarray(xs)
    at = np.array(got) / xa
    a3s = np.array([f["a3"] for f in sig_fits])

    def a_minus1(x, y, tau):
        return q * np.sum(np.atleast_2d(tau.T).T ** 2, axis=-1) if np.ndim(tau) > 1 else q * tau ** 2

    def a_tilde(x, y, tau):
        return np.interp(x, xa, at)

    def a_minus3(x, y, tau):
        return np.interp(x, xa, a3s)

    samp = near_sigma_samples(2000, 2, 0.1, 0, (xs[0], xs[-1]))
    st = structural_ellipticity_check(a_minus1, a_tilde, a_minus3, samp)
    res["ellipticity"] = {"c": st["c"], "failures": st["failures"], "pass": bool(st["c"] > 0 and not st["failures"])}
    res["sigma_fits"] = sig_fits
    res["angle_fits"] = lead
    res["verdicts"] = {k: res[k]["pass"] for k in ("leading", "subprincipal", "third_order", "ellipticity")}
    return res


def write_probe_csv(probes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "xi", "eta", "re_a", "im_a"])
        for p in probes:
            for a, b, v in zip(p.xi, p.eta, p.values):
                w.writerow([repr(float(p.x)), repr(float(p.y)), repr(float(a)), repr(float(b)),
                            repr(float(v.real)), repr(float(v.imag))])


def write_fit_csv(fits, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "a1", "a2_over_x", "a3", "resid"])
        for f in fits:
            x = f.get("x", 1.0)
            w.writerow([f["direction"], repr(f["a1"]), repr(f["a2"] / x), repr(f["a3"]), repr(f["resid"])])
