"""Dense discretization of the scattering quantization on a base grid.

Base grids are uniform in ``(x, y)`` with a single tangential variable.
For a row at ``(x, y)`` the kernel variables

    X = (x' - x) / x**2,   Y = (y' - y) / x

are sampled on the lattice ``X = q hx / x**2``, ``Y = t hy / x`` so that
every lattice point lands exactly on a grid node and no interpolation is
needed.  The kernel on that lattice is the inverse DFT of the symbol over the
dual frequency lattice, which makes ``quantize(1)`` the identity exactly.

Sign convention: ``K(X, Y) = (2 pi)^-2 \\int e^{+i(xi X + eta Y)} a d(xi, eta)``,
so the quantization of ``xi`` is ``i x^2 d/dx`` and composition and left
reduction carry the factor ``i^|alpha|``.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .symbols import SymbolField, SymbolOrder

__all__ = [
    "GridSpec",
    "KernelMatrix",
    "FullSymbolField",
    "NyquistError",
    "chi",
    "quantize",
    "left_reduce",
    "adjoint_symbol",
    "compose_symbols",
    "parametrix",
    "operator_norm_probe",
    "weighted_norm",
    "read_bbk1",
    "write_bbk1",
]


class NyquistError(ValueError):
    """Fiber grid too short for the kernel's reach; carries the required counts."""

    def __init__(self, required, given):
        self.required = tuple(required)
        self.given = tuple(given)
        super().__init__(f"fiber grid {self.given} does not cover the kernel support; "
                         f"need at least {self.required}")


# ---------------------------------------------------------------------------
# cutoff

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        f0 = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        f1 = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return f0 / (f0 + f1)


def chi(r, inner: float = 0.5, outer: float = 1.0):
    """Radial cutoff: 1 on ``r <= inner``, 0 on ``r >= outer``, smooth between.

    The profile is ``exp(1 - 1/(1 - t^2))`` with ``t`` a C-infinity smooth
    step from ``inner`` to ``outer``.
    """
    r = np.abs(np.asarray(r, dtype=float))
    t = _smoothstep((r - inner) / (outer - inner))
    with np.errstate(divide="ignore", over="ignore"):
        out = np.where(t < 1, np.exp(1.0 - 1.0 / np.where(t < 1, 1.0 - t * t, 1.0)), 0.0)
    return out


# ---------------------------------------------------------------------------
# grids and matrices

@dataclass(frozen=True)
class GridSpec:
    """Uniform base grid ``x_nodes x y_nodes``; flat index ``ix * ny + iy``.

    ``fiber_counts`` fixes the FFT sizes ``(Mx, My)``; ``None`` picks the
    smallest powers of two covering the kernel's reach.
    """

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    fiber_counts: tuple | None = None
    n: int = 2

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        y = np.asarray(self.y_nodes, dtype=float)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "y_nodes", y)
        if self.n != 2:
            raise ValueError("dense base grids are two-dimensional")
        if x.ndim != 1 or len(x) < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("x_nodes must be strictly increasing")
        if x[0] <= 0:
            raise ValueError("x_nodes must be bounded away from 0")
        for nodes, name in ((x, "x"), (y, "y")):
            d = np.diff(nodes)
            if len(d) and not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ValueError(f"{name}_nodes must be uniform")

    @classmethod
    def uniform(cls, x_lo, x_hi, nx, y_lo, y_hi, ny, fiber_counts=None):
        return cls(np.linspace(x_lo, x_hi, nx), np.linspace(y_lo, y_hi, ny), fiber_counts)

    @property
    def nx(self):
        return len(self.x_nodes)

    @property
    def ny(self):
        return len(self.y_nodes)

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def hx(self):
        return float(self.x_nodes[1] - self.x_nodes[0])

    @property
    def hy(self):
        return float(self.y_nodes[1] - self.y_nodes[0]) if self.ny > 1 else 1.0

    @property
    def x_floor(self):
        return float(self.x_nodes[0])

    def mesh(self):
        """Flattened node coordinates ``(x, y)``."""
        X, Y = np.meshgrid(self.x_nodes, self.y_nodes, indexing="ij")
        return X.ravel(), Y.ravel()

    def measure_weights(self):
        x, _ = self.mesh()
        return self.hx * self.hy / x ** 3

    def fiber_extent(self, x):
        """Largest resolved ``(|xi|, |eta|)`` at base coordinate ``x``."""
        return math.pi * x * x / self.hx, math.pi * x / self.hy

    def refine(self):
        """Halve both spacings on the same rectangle."""
        return GridSpec(np.linspace(self.x_nodes[0], self.x_nodes[-1], 2 * self.nx - 1),
                        np.linspace(self.y_nodes[0], self.y_nodes[-1], 2 * self.ny - 1))

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "x_nodes": self.x_nodes.tolist(),
                           "y_nodes": self.y_nodes.tolist(),
                           "fiber_counts": list(self.fiber_counts) if self.fiber_counts else None})

    @classmethod
    def from_json(cls, text: str) -> "GridSpec":
        d = json.loads(text)
        fc = tuple(d["fiber_counts"]) if d.get("fiber_counts") else None
        return cls(np.array(d["x_nodes"]), np.array(d["y_nodes"]), fc, d.get("n", 2))


@dataclass
class KernelMatrix:
    """Dense operator on grid functions; ``(K u)_i = sum_j entries[i, j] u_j``.

    The scattering measure ``dx dy / x^3`` is already folded into the entries;
    ``measure_weights`` define the inner product used for adjoints and norms.
    """

    grid: GridSpec
    entries: np.ndarray
    mass_lost: float = 0.0
    mass_total: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def measure_weights(self):
        return self.grid.measure_weights()

    @property
    def mass_loss_fraction(self):
        return self.mass_lost / self.mass_total if self.mass_total > 0 else 0.0

    def apply(self, u):
        return self.entries @ np.asarray(u)

    def __matmul__(self, other):
        if isinstance(other, KernelMatrix):
            return KernelMatrix(self.grid, self.entries @ other.entries)
        return self.apply(other)

    def __add__(self, other):
        return KernelMatrix(self.grid, self.entries + other.entries)

    def __sub__(self, other):
        return KernelMatrix(self.grid, self.entries - other.entries)

    def __mul__(self, c):
        return KernelMatrix(self.grid, c * self.entries)

    __rmul__ = __mul__

    def adjoint(self) -> "KernelMatrix":
        """Adjoint for the measure-weighted inner product: ``W^-1 K^H W``."""
        w = self.measure_weights
        return KernelMatrix(self.grid, (self.entries.conj().T * w[None, :]) / w[:, None])

    def real_if_close(self, tol: float = 1e-12) -> "KernelMatrix":
        e = self.entries
        if np.iscomplexobj(e) and np.max(np.abs(e.imag)) <= tol * max(np.max(np.abs(e.real)), 1e-300):
            e = np.ascontiguousarray(e.real)
        return KernelMatrix(self.grid, e, self.mass_lost, self.mass_total, self.meta)

    @classmethod
    def identity(cls, grid: GridSpec) -> "KernelMatrix":
        return cls(grid, np.eye(grid.size))

    @classmethod
    def multiplication(cls, grid: GridSpec, values) -> "KernelMatrix":
        return cls(grid, np.diag(np.asarray(values)))

    def save(self, path) -> None:
        write_bbk1(path, self.entries)

    @classmethod
    def load(cls, path, grid: GridSpec) -> "KernelMatrix":
        return cls(grid, read_bbk1(path))


def write_bbk1(path, entries) -> None:
    """``BBK1`` header (magic, rows, cols, flags) then row-major complex64 pairs."""
    e = np.asarray(entries)
    rows, cols = e.shape
    flags = 0 if np.iscomplexobj(e) else 1
    with open(path, "wb") as fh:
        fh.write(b"BBK1" + struct.pack("<III", rows, cols, flags))
        fh.write(np.ascontiguousarray(e, dtype="<c8").tobytes())


def read_bbk1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != b"BBK1":
            raise ValueError("not a BBK1 file")
        rows, cols, flags = struct.unpack("<III", head[4:])
        data = np.frombuffer(fh.read(), dtype="<c8")
    if data.size != rows * cols:
        raise ValueError("truncated BBK1 payload")
    out = data.reshape(rows, cols).astype(complex)
    return out.real.copy() if flags & 1 else out


# ---------------------------------------------------------------------------
# full symbols

@dataclass
class FullSymbolField:
    """Amplitude depending on the kernel variables too.

    ``eval(x, y, X, Y, xi, eta)`` on batched arrays, with ``y, Y, eta`` of
    shape ``(N, 1)``.
    """

    eval: Callable
    claimed_order: SymbolOrder = field(default_factory=SymbolOrder)
    name: str = ""
    remainder_order: SymbolOrder | None = None

    def __call__(self, x, y, X, Y, xi, eta):
        return self.eval(x, y, X, Y, xi, eta)

    @classmethod
    def from_symbol(cls, a: SymbolField) -> "FullSymbolField":
        return cls(lambda x, y, X, Y, xi, eta: a(x, y, xi, eta), a.claimed_order, a.name)


# ---------------------------------------------------------------------------
# quantization

def _pow2(v: int) -> int:
    return 1 << max(int(math.ceil(math.log2(max(v, 2)))), 1)


def _reach(grid: GridSpec, cut_outer: float):
    """Largest lattice offsets ``(q, t)`` a row can reach inside grid and cutoff."""
    qmax = int(min(grid.nx - 1, math.floor(cut_outer * grid.x_nodes[-1] / grid.hx)))
    tmax = int(min(grid.ny - 1, math.floor(cut_outer / grid.hy)))
    return qmax, tmax


def _fiber_sizes(grid: GridSpec, cut_outer: float, fiber_counts=None):
    qmax, tmax = _reach(grid, cut_outer)
    need = (_pow2(2 * qmax + 2), _pow2(2 * tmax + 2))
    given = fiber_counts or grid.fiber_counts
    if given is None:
        return need
    if given[0] < 2 * qmax + 1 or given[1] < 2 * tmax + 1:
        raise NyquistError(need, given)
    return tuple(int(v) for v in given)


def _is_y_invariant(a, grid: GridSpec, full: bool, rng=None) -> bool:
    if grid.ny == 1:
        return True
    rng = np.random.default_rng(12345) if rng is None else rng
    cnt = 64
    x = rng.uniform(grid.x_nodes[0], grid.x_nodes[-1], cnt)
    xi = rng.normal(size=cnt) * 3
    eta = rng.normal(size=(cnt, 1)) * 3
    vals = []
    for yv in (grid.y_nodes[0], grid.y_nodes[grid.ny // 3], grid.y_nodes[-1]):
        y = np.full((cnt, 1), yv)
        if full:
            X = rng.uniform(-0.3, 0.3, cnt) / x
            Y = rng.uniform(-0.3, 0.3, (cnt, 1)) / x[:, None]
            rng = np.random.default_rng(12345)
            vals.append(a(x, y, X, Y, xi, eta))
        else:
            vals.append(a(x, y, xi, eta))
    ref = np.abs(vals[0]).max() + 1e-300
    return all(np.max(np.abs(v - vals[0])) <= 1e-13 * ref for v in vals[1:])


def _place_rows(E, grid, ix, iy_list, Kw, q_lo, q_hi):
    """Scatter row kernels into the dense matrix.

    ``Kw`` has shape ``(len(iy_list) or 1, Mx, My)`` in FFT offset order.
    """
    ny = grid.ny
    My = Kw.shape[2]
    iy = np.asarray(iy_list)
    T = np.arange(ny)[None, :] - iy[:, None]              # target minus source in y
    for q in range(q_lo, q_hi + 1):
        p = ix + q
        rows = ix * ny + iy
        block_src = Kw[:, q % Kw.shape[1], :]            # (R or 1, My)
        if block_src.shape[0] == 1:
            vals = block_src[0][T % My]
        else:
            vals = np.take_along_axis(block_src, T % My, axis=1)
        E[rows, p * ny:(p + 1) * ny] = vals


def quantize(a, grid: GridSpec, cutoff: Callable | None = None, fiber_counts=None,
             y_invariant: bool | None = None, cut_outer: float = 1.0,
             interp_nodes: int = 7) -> KernelMatrix:
    """Dense matrix of the quantization of ``a`` on ``grid``.

    Parameters
    ----------
    a : SymbolField or FullSymbolField
    cutoff : callable of ``r = |(xX, xY)|``; defaults to :func:`chi`
    fiber_counts : FFT sizes ``(Mx, My)``; too small raises :class:`NyquistError`
    y_invariant : skip the per-row work when ``a`` ignores ``y``; detected
        by sampling when ``None``
    interp_nodes : Chebyshev nodes in ``xY`` for full symbols that depend on ``Y``

    The kernel mass falling outside the grid is tallied in ``mass_lost``.
    """
    cut = chi if cutoff is None else cutoff
    full = isinstance(a, FullSymbolField)
    Mx, My = _fiber_sizes(grid, cut_outer, fiber_counts)
    if y_invariant is None:
        y_invariant = _is_y_invariant(a, grid, full)
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    E = np.zeros((grid.size, grid.size), dtype=complex)
    lost = total = 0.0
    qoff = np.fft.fftfreq(Mx, 1.0 / Mx).astype(int)      # lattice offsets in FFT order
    toff = np.fft.fftfreq(My, 1.0 / My).astype(int)
    for ix, x in enumerate(grid.x_nodes):
        dX, dY = hx / x ** 2, hy / x
        xi = 2 * np.pi * np.fft.fftfreq(Mx, dX)
        eta = 2 * np.pi * np.fft.fftfreq(My, dY)
        w = cut(np.hypot((qoff * hx / x)[:, None], (toff * hy)[None, :]))
        inside = ((ix + qoff)[:, None] >= 0) & ((ix + qoff)[:, None] < nx)
        q_reach = qoff[(np.abs(qoff * hx / x) < cut_outer) & (ix + qoff >= 0) & (ix + qoff < nx)]
        q_lo, q_hi = int(q_reach.min()), int(q_reach.max())
        iys = [0] if y_invariant else list(range(ny))
        Kw = np.empty((len(iys), Mx, My), dtype=complex)
        for r, iy in enumerate(iys):
            yv = grid.y_nodes[iy]
            if full:
                K = _full_row_kernel(a, x, yv, xi, eta, qoff, toff, dX, dY, q_lo, q_hi,
                                     hy, ny, interp_nodes)
            else:
                XI, ETA = np.meshgrid(xi, eta, indexing="ij")
                vals = a(np.full(Mx * My, x), np.full((Mx * My, 1), yv), XI.ravel(),
                         ETA.reshape(-1, 1)).reshape(Mx, My)
                K = np.fft.ifft2(vals)
            Kw[r] = K * w
            # tally mass for each physical source row in this x-row
            t_in = lambda iyy: ((iyy + toff) >= 0) & ((iyy + toff) < ny)
            for iyy in (range(ny) if y_invariant else [iy]):
                mask = inside & t_in(iyy)[None, :]
                a_abs = np.abs(Kw[r])
                total += float(a_abs.sum())
                lost += float(a_abs[~mask].sum())
        _place_rows(E, grid, ix, np.arange(ny), Kw if not y_invariant else Kw[:1], q_lo, q_hi)
    km = KernelMatrix(grid, E, lost, total, {"fiber_counts": (Mx, My),
                                              "name": getattr(a, "name", "")})
    return km.real_if_close()


def _cheb_nodes(lo, hi, k):
    j = np.arange(k)
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.cos((2 * j + 1) * np.pi / (2 * k))


def _lagrange(nodes, s):
    """Lagrange basis values ``L_j(s)``, shape ``(len(s), len(nodes))``."""
    s = np.asarray(s, dtype=float)
    out = np.ones((len(s), len(nodes)))
    for j, nj in enumerate(nodes):
        for m, nm in enumerate(nodes):
            if m != j:
                out[:, j] *= (s - nm) / (nj - nm)
    return out


def _full_row_kernel(a, x, yv, xi, eta, qoff, toff, dX, dY, q_lo, q_hi, hy, ny, P):
    """Kernel of a full symbol on one row's lattice.

    The ``X`` dependence is treated exactly, one target column at a time; the
    ``Y`` dependence, if any, by Chebyshev interpolation in ``s = xY`` on the
    reachable range.
    """
    Mx, My = len(xi), len(eta)
    qs = np.arange(q_lo, q_hi + 1)
    smax = (ny - 1) * hy
    probe_sig = np.array([-0.7 * smax, 0.0, 0.6 * smax])
    # does the amplitude depend on Y?
    XI, ETA = np.meshgrid(xi[:: max(Mx // 8, 1)], eta[:: max(My // 8, 1)], indexing="ij")
    cnt = XI.size
    dep = False
    base = None
    for sg in probe_sig:
        v = a(np.full(cnt, x), np.full((cnt, 1), yv), np.full(cnt, qs[len(qs) // 2] * dX),
              np.full((cnt, 1), sg / x), XI.ravel(), ETA.reshape(-1, 1))
        if base is None:
            base = v
        elif np.max(np.abs(v - base)) > 1e-13 * (np.abs(base).max() + 1e-300):
            dep = True
    sig_nodes = _cheb_nodes(-smax, smax, P) if dep else np.array([0.0])
    XI, ETA = np.meshgrid(xi, eta, indexing="ij")
    nq = len(qs)
    K = np.zeros((Mx, My), dtype=complex)
    # DFT phase for the X direction at each target offset q (exact lattice)
    phase = np.exp(2j * np.pi * np.outer(qs, np.fft.fftfreq(Mx, 1.0 / Mx)) / Mx) / Mx   # (nq, Mx)
    tvals = toff * hy
    L = _lagrange(sig_nodes, np.clip(tvals, -smax, smax)) if dep else np.ones((My, 1))
    for k, sg in enumerate(sig_nodes):
        cntq = nq * Mx * My
        vals = a(np.full(cntq, x), np.full((cntq, 1), yv),
                 np.repeat(qs * dX, Mx * My),
                 np.full((cntq, 1), sg / x),
                 np.tile(XI.ravel(), nq), np.tile(ETA.ravel(), nq).reshape(-1, 1)).reshape(nq, Mx, My)
        g = np.einsum("qr,qru->qu", phase, vals)           # X transform at each q
        Kq = np.fft.ifft(g, axis=1)                          # Y transform
        K[qs % Mx, :] += Kq * L[:, k][None, :]
    return K


# ---------------------------------------------------------------------------
# finite differences

def _central(f, h, order):
    """Stencil points and weights for a central derivative of order <= 2."""
    if order == 0:
        return [(0, 1.0)]
    if order == 1:
        return [(1, 0.5 / h), (-1, -0.5 / h)]
    if order == 2:
        return [(1, 1.0 / h ** 2), (0, -2.0 / h ** 2), (-1, 1.0 / h ** 2)]
    raise ValueError("derivative order above 2 is not supported")


def _multi_indices(N: int):
    """Multi-indices ``(a1, a2)`` with ``|alpha| < N``."""
    return [(i, j) for i in range(N) for j in range(N) if i + j < N]


def _bracket(xi, eta):
    return np.sqrt(1.0 + xi ** 2 + np.sum(eta ** 2, axis=1))


def _zeta_derivative(a, alpha, x, y, xi, eta, rel=1e-3):
    """``d_xi^a1 d_eta^a2 a`` by central differences scaled with <zeta>."""
    h = rel * _bracket(xi, eta)
    out = 0.0
    for (p, wp), (q, wq) in itertools.product(_central(a, 1.0, alpha[0]), _central(a, 1.0, alpha[1])):
        if wp == 0 or wq == 0:
            continue
        scale = h ** -(alpha[0] + alpha[1])
        out = out + wp * wq * scale * a(x, y, xi + p * h, eta + (q * h)[:, None])
    return out


def _Z_derivative(b, alpha, x, y, xi, eta, rel=1e-3):
    """``d_X^a1 d_Y^a2 b`` at ``X = Y = 0``; steps scale like ``1/x``."""
    h = rel / x
    out = 0.0
    zero = np.zeros_like(x)
    for (p, wp), (q, wq) in itertools.product(_central(b, 1.0, alpha[0]), _central(b, 1.0, alpha[1])):
        scale = h ** -(alpha[0] + alpha[1])
        out = out + wp * wq * scale * b(x, y, zero + p * h, (q * h)[:, None], xi, eta)
    return out


# ---------------------------------------------------------------------------
# symbolic operations

def left_reduce(at: FullSymbolField, N: int = 2, rel: float = 5e-3):
    """Left symbol ``sum_{|alpha|<N} i^|alpha|/alpha! d_zeta^alpha d_Z^alpha at |_{Z=0}``.

    Returns ``(SymbolField, remainder_order)``; mixed derivatives are central
    differences, with zeta steps ``rel * <zeta>`` and ``Z`` steps ``rel / x``.
    """
    idx = _multi_indices(N)

    def ev(x, y, xi, eta):
        zero = np.zeros_like(x)
        total = at(x, y, zero, zero[:, None], xi, eta).astype(complex)
        for alpha in idx:
            if alpha == (0, 0):
                continue
            hz = rel * _bracket(xi, eta)
            hZ = rel / x
            acc = 0.0
            sten = [_central(None, 1.0, o) for o in (alpha[0], alpha[1], alpha[0], alpha[1])]
            for (p1, w1), (p2, w2), (p3, w3), (p4, w4) in itertools.product(*sten):
                acc = acc + w1 * w2 * w3 * w4 * at(
                    x, y, p3 * hZ, (p4 * hZ)[:, None], xi + p1 * hz, eta + (p2 * hz)[:, None])
            k = alpha[0] + alpha[1]
            acc = acc * hz ** -k * hZ ** -k
            total = total + (1j ** k) / (math.factorial(alpha[0]) * math.factorial(alpha[1])) * acc
        return total

    o = at.claimed_order
    rem = SymbolOrder(o.m - N, o.l - N, o.k + N, o.j + N)
    return SymbolField(ev, o, name=f"left({at.name})"), rem


def adjoint_symbol(a, n: int = 2) -> FullSymbolField:
    """Full symbol of the adjoint for the measure ``dx dy / x^{n+1}``.

    With ``s = xX``:  conj a(x + x^2 X, y + xY, (1+s)^2 xi, (1+s) eta) (1+s)^{-(n+1)}.
    A full symbol ``a`` additionally gets ``(-X/(1+s)^2, -Y/(1+s))``.
    """
    full = isinstance(a, FullSymbolField)

    def ev(x, y, X, Y, xi, eta):
        s = x * X
        g = 1.0 + s
        xp, yp = x + x * x * X, y + x[:, None] * Y
        if full:
            v = a(xp, yp, -X / g ** 2, -Y / g[:, None], g ** 2 * xi, g[:, None] * eta)
        else:
            v = a(xp, yp, g ** 2 * xi, g[:, None] * eta)
        return np.conj(v) * g ** -(n + 1)

    return FullSymbolField(ev, a.claimed_order, name=f"adj({a.name})")


def _transported(b, n: int = 2) -> FullSymbolField:
    """Second factor of a composition rewritten at the first factor's base point."""
    if isinstance(b, FullSymbolField):
        return b

    def ev(x, y, X, Y, xi, eta):
        g = 1.0 + x * X
        return b(x + x * x * X, y + x[:, None] * Y, g ** 2 * xi, g[:, None] * eta)

    return FullSymbolField(ev, b.claimed_order, name=f"T({b.name})")


def compose_symbols(a: SymbolField, b, N: int = 2, rel: float = 1e-3) -> SymbolField:
    """Truncated composition ``sum_{|alpha|<N} i^|alpha|/alpha! d_zeta^alpha a d_Z^alpha bt``.

    ``bt`` is ``b`` transported to the left base point,
    ``b(x + x^2 X, y + xY, (1+xX)^2 xi, (1+xX) eta)``; a :class:`FullSymbolField`
    ``b`` is taken to be that amplitude already.  The result records its
    remainder order in ``remainder_order``.
    """
    bt = _transported(b)
    idx = _multi_indices(N)

    def ev(x, y, xi, eta):
        total = 0.0
        for alpha in idx:
            k = alpha[0] + alpha[1]
            da = a(x, y, xi, eta) if k == 0 else _zeta_derivative(a, alpha, x, y, xi, eta, rel)
            db = _Z_derivative(bt, alpha, x, y, xi, eta, rel)
            total = total + (1j ** k) / (math.factorial(alpha[0]) * math.factorial(alpha[1])) * da * db
        return total

    o = a.claimed_order + bt.claimed_order
    out = SymbolField(ev, o, name=f"({a.name})#({getattr(b, 'name', '')})")
    out.remainder_order = SymbolOrder(o.m - N, o.l - N, o.k + N, o.j + N)
    return out


# ---------------------------------------------------------------------------
# parametrix and norms

def operator_norm_probe(K, probe_count: int = 40, seed: int = 0, mask=None, tol: float = 1e-10):
    """Power-iteration estimate of ``||K||`` on the measure-weighted L^2 space.

    ``mask`` (0/1 per node) restricts to ``mask K mask``.
    """
    E = K.entries if isinstance(K, KernelMatrix) else np.asarray(K)
    w = K.measure_weights if isinstance(K, KernelMatrix) else np.ones(E.shape[0])
    sw = np.sqrt(w)
    B = (sw[:, None] * E) / sw[None, :]
    if mask is not None:
        m = np.asarray(mask, dtype=float)
        B = m[:, None] * B * m[None, :]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=B.shape[1])
    if mask is not None:
        v *= np.asarray(mask, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(probe_count):
        u = B @ v
        v2 = B.conj().T @ u
        lam = float(np.sqrt(abs(np.vdot(v, v2))))
        nv = np.linalg.norm(v2)
        if nv == 0:
            return 0.0
        v = v2 / nv
        if abs(lam - est) <= tol * max(lam, 1e-300):
            est = lam
            break
        est = lam
    return est


def weighted_norm(grid: GridSpec, u) -> float:
    return float(np.sqrt(np.sum(grid.measure_weights() * np.abs(u) ** 2)))


def parametrix(a: SymbolField, grid: GridSpec, iterations: int = 3, mode: str = "operator",
               tests=None, N: int = 2, A: KernelMatrix | None = None, samples=None,
               min_constant: float = 0.0, **qopts):
    """Elliptic parametrix ``Q`` of ``quantize(a)`` and residual ``R = Q A - I``.

    ``mode="operator"`` starts from ``quantize(1/a)`` and applies Newton steps
    ``Q <- Q - Q (A Q - I)`` on the dense matrices; ``mode="symbol"`` iterates
    ``q <- q - q # (a # q - 1)`` at truncation ``N`` before quantizing.
    Returns ``(Q, R, history)`` with ``history`` the relative residual on
    ``tests`` (columns of grid functions) after each step.
    """
    from .symbols import reciprocal_symbol, is_elliptic
    if samples is not None:
        c = is_elliptic(a, samples)
        if not c > min_constant:
            raise ValueError(f"ellipticity failure: measured constant {c:g}")
    q = reciprocal_symbol(a, lambda x, y, xi, eta: np.ones_like(x))
    A = quantize(a, grid, **qopts) if A is None else A
    I = np.eye(grid.size)

    def resid(Qe):
        Re = Qe @ A.entries - I
        if tests is None:
            return operator_norm_probe(KernelMatrix(grid, Re), 30)
        T = np.asarray(tests)
        num = np.array([weighted_norm(grid, Re @ T[:, k]) for k in range(T.shape[1])])
        den = np.array([weighted_norm(grid, T[:, k]) for k in range(T.shape[1])])
        return float(np.max(num / den))

    history = []
    if mode == "symbol":
        for _ in range(iterations):
            Q = quantize(q, grid, **qopts)
            history.append(resid(Q.entries))
            aq = compose_symbols(a, q, N)
            qq = q
            err = SymbolField(lambda x, y, xi, eta, aq=aq: aq(x, y, xi, eta) - 1.0, SymbolOrder())
            corr = compose_symbols(qq, err, N)
            q = SymbolField(lambda x, y, xi, eta, qq=qq, corr=corr: qq(x, y, xi, eta) - corr(x, y, xi, eta),
                            qq.claimed_order, name=f"newton({qq.name})")
        Q = quantize(q, grid, **qopts).entries
    elif mode == "operator":
        Q = quantize(q, grid, **qopts).entries
        for _ in range(iterations):
            history.append(resid(Q))
            Q = Q - Q @ (A.entries @ Q - I)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    history.append(resid(Q))
    R = Q @ A.entries - I
    return KernelMatrix(grid, Q), KernelMatrix(grid, R), history
