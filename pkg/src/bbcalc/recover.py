"""Local recovery near a strictly convex boundary point.

The unknown ``r`` enters the data through ``d_i = N[d_i r] + N~_i[r]`` for the
two derivative channels ``i = x, y``.  Conjugating by ``exp(-F/x)`` and
writing ``f = exp(-F/x) r`` turns these into

    x^2 Q d~_0 = C_0 f + x^2 E_0 f,     C_0 = x^2 d_x - F,
    x   Q d~_1 = C_1 f + x   E_1 f,     C_1 = x d_y,

with ``Q`` a parametrix of ``N_F`` (``Q N_F = I + R``) and
``E_i = R D_i + Q N~_{i,F}``.  The elliptic combination
``B = P_0 C_0 + P_1 C_1`` with ``P_0 = Op((i xi - F)/<zeta>)`` and
``P_1 = Op(i eta/<zeta>)`` has symbol ``(xi^2 + F^2 + eta^2)/<zeta>``; a
parametrix ``B'`` gives ``f + G f = B' rhs`` with
``G = B' (P_0 x^2 E_0 + P_1 x E_1) + (B' B - I)``, solved by Neumann
iteration.  ``||phi_c G phi_c||`` is the contraction constant ``eps(c)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import (ParaboloidChart, RayQuadrature, TestWeight, normal_operator_apply,
                       normal_operator_matrix)
from .normalop import finite_point_symbol
from .quantize import GridSpec, KernelMatrix, chi, operator_norm_probe, quantize, weighted_norm
from .symbols import SymbolField, SymbolOrder

__all__ = [
    "BumpTruth",
    "RecoveryProblem",
    "Operators",
    "assemble_normal_operators",
    "derivative_matrices",
    "row_symbol_parametrix",
    "galerkin_inverse",
    "trial_basis",
    "RecoveryResult",
    "build_error_operator",
    "elliptic_combination",
    "contraction_epsilon",
    "synthetic_data",
    "recover",
    "write_bbg1",
    "read_bbg1",
]


@dataclass
class BumpTruth:
    """``r = amp * b((x - x0)/wx) b((y - y0)/wy)`` with ``b(s) = exp(1 - 1/(1 - s^2))`` on ``|s| < 1``."""

    x0: float
    y0: float
    wx: float
    wy: float
    amp: float = 1.0

    @staticmethod
    def _b(s):
        s = np.asarray(s, dtype=float)
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        q = 1.0 - s[inside] ** 2
        out[inside] = np.exp(1.0 - 1.0 / q)
        return out

    @staticmethod
    def _db(s):
        s = np.asarray(s, dtype=float)
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        si = s[inside]
        q = 1.0 - si ** 2
        out[inside] = np.exp(1.0 - 1.0 / q) * (-2 * si / q ** 2)
        return out

    def __call__(self, x, y):
        return self.amp * self._b((x - self.x0) / self.wx) * self._b((y - self.y0) / self.wy)

    def dx(self, x, y):
        return self.amp * self._db((x - self.x0) / self.wx) / self.wx * self._b((y - self.y0) / self.wy)

    def dy(self, x, y):
        return self.amp * self._b((x - self.x0) / self.wx) * self._db((y - self.y0) / self.wy) / self.wy

    def support_box(self):
        return (self.x0 - self.wx, self.x0 + self.wx), (self.y0 - self.wy, self.y0 + self.wy)


@dataclass
class RecoveryProblem:
    chart: ParaboloidChart
    grid: GridSpec
    weight: Callable
    weight_tilde: tuple            # scalar-channel weights (x, y)
    F: float = 1.0
    eps: float = 0.25
    truth: Callable | None = None
    quad: RayQuadrature | None = None
    band: float = 0.4              # kept fraction of the y Nyquist band
    top_margin: float = 0.5        # unknowns vanish for x >= c - top_margin * hx

    @classmethod
    def default(cls, c: float = 0.05, n: int = 64, F: float = 1.0, s: float = 1.0,
                tilde=(0.5, 0.5), truth: Callable | None = None, kappa: float = 0.25,
                band: float = 0.4, top_margin: float = 0.5):
        chart = ParaboloidChart(kappa, c, 3)
        half = float(chart.lens_halfwidth(0.0))
        grid = GridSpec.uniform(c / 16, c, n, -half, half, n)
        T = 1.5 * chart.max_travel_time()
        A = TestWeight(s=s, T=T, c=c)
        At = tuple(TestWeight(s=0.5, T=T, c=c, scale=v, tilt=0.3) for v in tilde)
        return cls(chart, grid, A, At, F, truth=truth, band=band, top_margin=top_margin)

    def check_support(self):
        """Raise unless the truth vanishes outside the working region on the grid."""
        if self.truth is None:
            return
        xs, ys = self.grid.mesh()
        v = np.abs(self.truth(xs, ys))
        half = np.asarray(self.chart.lens_halfwidth(xs))
        outside = (np.abs(ys) >= half) | (xs >= self.chart.c)
        if np.any(v[outside] > 0):
            k = int(np.argmax(np.where(outside, v, 0)))
            raise ValueError(f"truth not supported in the working region: value {v[k]:g} at "
                             f"(x={xs[k]:g}, y={ys[k]:g})")


@dataclass
class Operators:
    N: KernelMatrix
    Nt: KernelMatrix
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    D: tuple = ()
    C: tuple = ()
    P: tuple = ()
    B: np.ndarray | None = None
    Bp: np.ndarray | None = None
    G: np.ndarray | None = None
    V: np.ndarray | None = None     # orthonormal trial basis, None for the whole grid
    GV: np.ndarray | None = None    # G on the trial space
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------

def _check_subprincipal_hypothesis(prob: RecoveryProblem, samples: int = 64):
    """``d_t d_w A > 0`` at the perpendicular directions (straight rays: ``beta = 0``)."""
    from .normalop import _perp_derivatives
    xs = np.linspace(prob.grid.x_nodes[0], prob.grid.x_nodes[-1], 8)
    ys = np.linspace(prob.grid.y_nodes[0], prob.grid.y_nodes[-1], 8)
    lam = np.linspace(-1, 1, samples // 8)
    for x in xs:
        for y in ys:
            for k, (mixed, _) in enumerate(_perp_derivatives(prob.weight, x, y, x * lam, 1e-4, 1e-4)):
                if np.min(mixed) <= 0:
                    raise ValueError(f"subprincipal hypothesis fails at x={x:g}, y={y:g}, perp #{k}")


def _unit(w):
    return replace(w, scale=1.0) if hasattr(w, "scale") else w


def assemble_normal_operators(prob: RecoveryProblem, decay: list | None = None):
    """Dense ``N_F`` (gradient channels share it) and ``N~_F``.

    ``N~_F`` uses ``weight_tilde[0]`` at unit scale; channel ``i`` is
    ``weight_tilde[i].scale * N~_F``.
    """
    _check_subprincipal_hypothesis(prob)
    N = normal_operator_matrix(prob.grid, prob.chart, prob.weight, prob.F, prob.eps, prob.quad,
                               decay=decay)
    Nt = normal_operator_matrix(prob.grid, prob.chart, _unit(prob.weight_tilde[0]), prob.F,
                                prob.eps, prob.quad, decay=decay)
    return N, Nt


def derivative_matrices(grid: GridSpec):
    """Fourth-order finite differences ``d_x`` and ``d_y``.

    Centered five-point stencils in the interior, one-sided five-point
    stencils on the two outermost nodes of each edge.
    """
    def d1(n, h):
        if n < 5:
            raise ValueError("derivative stencils need at least 5 nodes per axis")
        D = np.zeros((n, n))
        centered = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
        for i in range(2, n - 2):
            D[i, i - 2:i + 3] = centered
        D[0, :5] = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
        D[1, :5] = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0
        D[-1, -5:] = -D[0, :5][::-1]
        D[-2, -5:] = -D[1, :5][::-1]
        return D / h
    Dx = np.kron(d1(grid.nx, grid.hx), np.eye(grid.ny))
    Dy = np.kron(np.eye(grid.nx), d1(grid.ny, grid.hy))
    return Dx, Dy


def _boundary_symbol(prob: RecoveryProblem, n_theta: int = 128):
    A, alpha, F = prob.weight, prob.chart.kappa, prob.F

    def ev(x, y, xi, eta):
        e1 = np.asarray(eta)[:, 0]
        return finite_point_symbol(A, alpha, F, np.asarray(xi), np.stack([e1, 0 * e1], 1),
                                   n_theta=n_theta).astype(complex)
    return ev


def galerkin_inverse(A: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``V (V^T A V)^{-1} V^T``: the inverse of ``A`` on the span of the orthonormal columns ``V``."""
    return V @ np.linalg.solve(V.T @ A @ V, V.T)


def _parametrix(Q, A, grid, steps, history, accept: float = 0.5):
    """Newton steps ``Q <- Q - (Q A - I) Q`` while they contract.

    Falls back to the exact inverse of ``A`` when the residual norm is not
    below ``accept`` after the steps; returns ``(Q, method)``.
    """
    I = np.eye(Q.shape[0])
    best = None
    for k in range(steps + 1):
        Rm = Q @ A - I
        nrm = operator_norm_probe(KernelMatrix(grid, Rm), 20)
        history.append(nrm)
        if best is not None and nrm >= best:
            break
        best = nrm
        if nrm < 1e-12 or k == steps:
            break
        Q = Q - Rm @ Q
    if best is not None and best < accept and history[-1] == best:
        return Q, "newton"
    Q = np.linalg.solve(A, I)
    history.append(operator_norm_probe(KernelMatrix(grid, Q @ A - I), 20))
    return Q, "exact"


def row_symbol_parametrix(K: np.ndarray, grid: GridSpec, floor: float = 1e-8, cut_outer: float = 1.0):
    """Frozen-row inverse of a ``y``-invariant matrix.

    For each ``x`` row the stencil of the middle ``y`` node is Fourier
    transformed on its lattice, inverted (``conj(a)/(|a|^2 + floor^2 max|a|^2)``)
    and transformed back; the result is cut off like :func:`quantize` output.
    """
    from .quantize import _place_rows
    nx, ny = grid.shape
    Mx, My = 2 * _pow2(nx), 2 * _pow2(ny)
    iy0 = ny // 2
    qoff = np.fft.fftfreq(Mx, 1.0 / Mx).astype(int)
    toff = np.fft.fftfreq(My, 1.0 / My).astype(int)
    out = np.zeros((grid.size, grid.size))
    for ix, x in enumerate(grid.x_nodes):
        row = K[ix * ny + iy0].reshape(nx, ny)
        arr = np.zeros((Mx, My))
        q = np.arange(nx) - ix
        t = np.arange(ny) - iy0
        arr[np.ix_(q % Mx, t % My)] = row
        a = np.fft.fft2(arr)
        amax = np.max(np.abs(a))
        inv = np.conj(a) / (np.abs(a) ** 2 + (floor * amax) ** 2)
        Kq = np.fft.ifft2(inv).real
        w = chi(np.hypot((qoff * grid.hx / x)[:, None], (toff * grid.hy)[None, :]), 0.5, cut_outer)
        q_ok = qoff[(ix + qoff >= 0) & (ix + qoff < nx)]
        _place_rows(out, grid, ix, np.arange(ny), (Kq * w)[None], int(q_ok.min()), int(q_ok.max()))
    return out


def _pow2(n):
    return 1 << int(math.ceil(math.log2(max(n, 1))))


def _real(m):
    # strided ``.real`` views fall off the BLAS fast path
    return np.ascontiguousarray(np.real(m))


def trial_basis(prob: RecoveryProblem) -> np.ndarray:
    """Orthonormal columns spanning the unknowns.

    Each grid row with ``x < c - top_margin * hx`` carries the real Fourier
    modes in ``y`` up to ``band`` times the Nyquist frequency; rows at the
    artificial boundary carry nothing, which is the support condition
    ``f = 0`` on ``x >= c``.
    """
    grid = prob.grid
    ny = grid.ny
    j = np.arange(ny)
    cols = [np.ones(ny)]
    for k in range(1, int(prob.band * ny / 2) + 1):
        cols += [np.cos(2 * np.pi * k * j / ny), np.sin(2 * np.pi * k * j / ny)]
    phi, _ = np.linalg.qr(np.array(cols).T)
    rows = np.flatnonzero(grid.x_nodes < prob.chart.c - prob.top_margin * grid.hx)
    if len(rows) == 0:
        raise ValueError("top_margin leaves no grid rows for the unknowns")
    ex = np.eye(grid.nx)[:, rows]
    return np.ascontiguousarray(np.kron(ex, phi))


def build_error_operator(prob: RecoveryProblem, ops: Operators, method: str = "galerkin",
                         newton_steps: int = 3) -> Operators:
    """Parametrix ``Q`` of ``N_F`` and the channel derivative operators.

    ``method="galerkin"`` inverts ``N_F`` on the trial space
    (:func:`trial_basis`), so ``R = Q N_F - I`` vanishes on it.  ``"row"``
    and ``"boundary"`` start Newton from the frozen-row inverse of the matrix
    or from the quantized reciprocal of the ``x = 0`` closed-form symbol and
    work on the whole grid.  The residual norm is recorded either way.
    """
    grid = prob.grid
    hist = []
    if method == "galerkin":
        ops.V = trial_basis(prob)
        Q = galerkin_inverse(ops.N.entries, ops.V)
        how = "galerkin"
    elif method in ("row", "boundary"):
        ops.V = None
        if method == "row":
            Q = row_symbol_parametrix(ops.N.entries, grid)
        else:
            a0 = _boundary_symbol(prob)
            q = SymbolField(lambda x, y, xi, eta: 1.0 / a0(x, y, xi, eta), SymbolOrder(1, 0, 2, 2),
                            name="1/a_boundary")
            Q = _real(quantize(q, grid, y_invariant=True).entries)
        Q, how = _parametrix(Q, ops.N.entries, grid, newton_steps, hist)
    else:
        raise ValueError(f"unknown parametrix method {method!r}")
    R = Q @ ops.N.entries - np.eye(grid.size)
    if ops.V is not None:
        hist.append(float(np.linalg.norm(R @ ops.V, 2)))
    ops.meta["parametrix_method"] = how
    ops.meta["parametrix_residual"] = hist
    Dx, Dy = derivative_matrices(grid)
    xs, _ = grid.mesh()
    D0 = Dx - np.diag(prob.F / xs ** 2)
    ops.Q, ops.R, ops.D = Q, R, (D0, Dy)
    ops.C = (xs[:, None] ** 2 * D0, xs[:, None] * Dy)
    return ops


def elliptic_combination(prob: RecoveryProblem, ops: Operators, newton_steps: int = 4) -> Operators:
    """``P_0``, ``P_1``, ``B``, its parametrix ``B'`` and ``G``.

    ``B'`` is the Galerkin inverse on the trial space when one is set,
    otherwise frozen-row plus Newton with the exact-inverse fallback.
    """
    grid, F = prob.grid, prob.F
    br = lambda xi, eta: np.sqrt(1 + xi ** 2 + eta[:, 0] ** 2)
    P0 = quantize(SymbolField(lambda x, y, xi, eta: (1j * xi - F) / br(xi, eta), SymbolOrder(0, 0, 0, 0)),
                  grid, y_invariant=True).entries
    P1 = quantize(SymbolField(lambda x, y, xi, eta: 1j * eta[:, 0] / br(xi, eta), SymbolOrder(0, 0, 0, 0)),
                  grid, y_invariant=True).entries
    P0, P1 = _real(P0), _real(P1)
    B = P0 @ ops.C[0] + P1 @ ops.C[1]
    hist = []
    if ops.V is not None:
        Bp, how = galerkin_inverse(B, ops.V), "galerkin"
    else:
        Bp, how = _parametrix(row_symbol_parametrix(B, grid), B, grid, newton_steps, hist)
    ops.meta["B_parametrix_residual"] = hist
    ops.meta["B_parametrix_method"] = how
    xs, _ = grid.mesh()
    t0 = prob.weight_tilde[0].scale
    t1 = prob.weight_tilde[1].scale
    QNt = ops.Q @ ops.Nt.entries
    E0 = ops.R @ ops.D[0] + t0 * QNt
    E1 = ops.R @ ops.D[1] + t1 * QNt
    Fop = P0 @ (xs[:, None] ** 2 * E0) + P1 @ (xs[:, None] * E1)
    del E0, E1, QNt
    G = Bp @ Fop + (Bp @ B - np.eye(grid.size))
    ops.P, ops.B, ops.Bp, ops.G = (P0, P1), B, Bp, G
    ops.GV = G if ops.V is None else ops.V.T @ G @ ops.V
    return ops


def _phi(prob: RecoveryProblem, inner: float = 0.75):
    xs, ys = prob.grid.mesh()
    half = prob.grid.y_nodes[-1]
    return chi(xs / prob.chart.c, inner, 1.0 + 1e-9) * chi(np.abs(ys) / half, inner, 1.0 + 1e-9)


def contraction_epsilon(prob: RecoveryProblem, ops: Operators, probes: int = 60) -> float:
    """``||phi_c G phi_c||`` on the scattering-weighted L^2 space, restricted to the trial space."""
    phi = _phi(prob)
    G = ops.G if ops.V is None else ops.V @ ops.GV @ ops.V.T
    M = phi[:, None] * G * phi[None, :]
    return operator_norm_probe(KernelMatrix(prob.grid, M), probes)


def synthetic_data(prob: RecoveryProblem, ops: Operators | None = None, method: str = "rays"):
    """Conjugated data ``exp(-F/x) d_i`` for ``i = 0, 1``.

    ``method="rays"`` integrates the analytic truth and its gradient along the
    rays, independently of the assembled matrices; ``method="matrix"`` applies
    the matrices to grid samples.
    """
    grid, F = prob.grid, prob.F
    xs, ys = grid.mesh()
    r = prob.truth
    if method == "rays":
        unit = _unit(prob.weight_tilde[0])
        kw = dict(F=F, eps=prob.eps, quad=prob.quad, conjugate=False)
        Nr = normal_operator_apply(grid, prob.chart, unit, r, **kw)
        d0 = normal_operator_apply(grid, prob.chart, prob.weight, r.dx, **kw) + prob.weight_tilde[0].scale * Nr
        d1 = normal_operator_apply(grid, prob.chart, prob.weight, r.dy, **kw) + prob.weight_tilde[1].scale * Nr
        damp = np.exp(-F / xs)
        return damp * d0, damp * d1
    if method == "matrix":
        f = np.exp(-F / xs) * r(xs, ys)
        D0, D1 = ops.D
        Nf = ops.Nt.entries @ f
        return (ops.N.entries @ (D0 @ f) + prob.weight_tilde[0].scale * Nf,
                ops.N.entries @ (D1 @ f) + prob.weight_tilde[1].scale * Nf)
    raise ValueError(f"unknown data method {method!r}")


@dataclass
class RecoveryResult:
    f: np.ndarray
    r: np.ndarray
    updates: list           # relative size of successive updates
    errors: list            # relative weighted error per iterate, when a reference is given
    converged: bool


def recover(prob: RecoveryProblem, data, ops: Operators, max_iter: int = 200, tol: float = 1e-8,
            reference: np.ndarray | None = None) -> RecoveryResult:
    """Neumann iteration ``f <- B' rhs - G f`` on the trial space.

    ``reference`` (a conjugated truth on the grid) turns on the per-iterate
    error log.  Nodes where ``exp(F/x)`` overflows get ``r = nan``.
    """
    grid = prob.grid
    xs, _ = grid.mesh()
    d0, d1 = data
    rhs = ops.P[0] @ (xs ** 2 * (ops.Q @ d0)) + ops.P[1] @ (xs * (ops.Q @ d1))
    g = ops.Bp @ rhs
    lift = (lambda v: v) if ops.V is None else (lambda v: ops.V @ v)
    if ops.V is not None:
        g = ops.V.T @ g
    ref_norm = None if reference is None else max(weighted_norm(grid, reference), 1e-300)
    errors = []
    scale = weighted_norm(grid, lift(g))
    fb = g.copy()
    updates = []
    converged = scale == 0
    for _ in range(0 if converged else max_iter):
        new = g - ops.GV @ fb
        step = weighted_norm(grid, lift(new - fb)) / scale
        fb = new
        updates.append(step)
        if ref_norm is not None:
            errors.append(weighted_norm(grid, lift(fb) - reference) / ref_norm)
        if not np.isfinite(step):
            break
        if step <= tol:
            converged = True
            break
    f = lift(fb)
    with np.errstate(over="ignore", invalid="ignore"):
        r = f * np.exp(prob.F / xs)
    return RecoveryResult(f, r, updates, errors, converged)


# ---------------------------------------------------------------------------
# BBG1: the BBK1 header with magic "BBG1" (u32 rows, u32 cols, u32 flags = 1 for
# real), then row-major float32 little-endian values; the grid goes alongside as JSON.

def write_bbg1(path, grid: GridSpec, values) -> None:
    v = np.asarray(values, dtype=np.float64).reshape(grid.shape)
    with open(path, "wb") as fh:
        fh.write(b"BBG1")
        fh.write(struct.pack("<III", grid.nx, grid.ny, 1))
        fh.write(v.astype("<f4").tobytes())


def read_bbg1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"BBG1":
            raise ValueError("not a BBG1 file")
        nx, ny, _ = struct.unpack("<III", fh.read(12))
        v = np.frombuffer(fh.read(4 * nx * ny), dtype="<f4")
    if v.size != nx * ny:
        raise ValueError("truncated BBG1 payload")
    return v.reshape(nx, ny).astype(np.float64)
