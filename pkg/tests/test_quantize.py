import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbcalc.quantize import (GridSpec, KernelMatrix, NyquistError, chi, compose_symbols,
                             operator_norm_probe, quantize, read_bbk1, weighted_norm, write_bbk1)
from bbcalc.symbols import SymbolField, SymbolOrder


@given(st.floats(0, 3))
def test_cutoff_range(r):
    v = float(chi(r))
    assert 0.0 <= v <= 1.0
    if r <= 0.5:
        assert v == 1.0
    if r >= 1.0:
        assert v == 0.0


def test_cutoff_monotone():
    r = np.linspace(0, 1.2, 500)
    assert np.all(np.diff(chi(r)) <= 1e-15)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(np.array([0.0, 0.1, 0.2]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        GridSpec(np.array([0.1, 0.2, 0.4]), np.array([0.0, 1.0]))


def test_grid_json_round_trip():
    g = GridSpec.uniform(0.02, 0.2, 9, -0.3, 0.3, 7, fiber_counts=(64, 32))
    h = GridSpec.from_json(g.to_json())
    np.testing.assert_array_equal(g.x_nodes, h.x_nodes)
    np.testing.assert_array_equal(g.y_nodes, h.y_nodes)
    assert h.fiber_counts == (64, 32)
    r = g.refine()
    assert r.shape == (17, 13) and r.hx == pytest.approx(g.hx / 2)


def test_unit_symbol_is_identity():
    g = GridSpec.uniform(0.02, 0.2, 16, -0.4, 0.4, 16)
    Q = quantize(SymbolField(lambda x, y, xi, eta: np.ones_like(xi) + 0j, SymbolOrder()), g)
    np.testing.assert_allclose(Q.entries, np.eye(g.size), atol=1e-12)


def test_multiplier_symbol_is_diagonal():
    g = GridSpec.uniform(0.02, 0.2, 12, -0.4, 0.4, 10)
    Q = quantize(SymbolField(lambda x, y, xi, eta: (1 + x) * (2 + np.sin(y[:, 0])) + 0j), g)
    xs, ys = g.mesh()
    np.testing.assert_allclose(Q.entries, np.diag((1 + xs) * (2 + np.sin(ys))), atol=1e-12)


def test_short_fiber_grid_raises():
    g = GridSpec.uniform(0.02, 0.2, 16, -0.4, 0.4, 16, fiber_counts=(2, 2))
    with pytest.raises(NyquistError) as err:
        quantize(SymbolField(lambda x, y, xi, eta: np.exp(-xi ** 2) + 0j), g)
    assert err.value.required[0] > 2


def test_bbk1_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 7)) + 1j * rng.normal(size=(5, 7))
    write_bbk1(tmp_path / "z.bbk", z)
    np.testing.assert_allclose(read_bbk1(tmp_path / "z.bbk"), z.astype(np.complex64))
    r = rng.normal(size=(3, 4))
    write_bbk1(tmp_path / "r.bbk", r)
    back = read_bbk1(tmp_path / "r.bbk")
    assert not np.iscomplexobj(back)
    np.testing.assert_allclose(back, r.astype(np.float32))


def test_bbk1_rejects_other_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        read_bbk1(tmp_path / "bad")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_adjoint_is_weighted_transpose(seed):
    g = GridSpec.uniform(0.05, 0.5, 5, -1, 1, 4)
    rng = np.random.default_rng(seed)
    K = KernelMatrix(g, rng.normal(size=(g.size, g.size)) + 1j * rng.normal(size=(g.size, g.size)))
    u, v = rng.normal(size=g.size), rng.normal(size=g.size)
    w = g.measure_weights()
    lhs = np.vdot(v * w, K @ u)
    rhs = np.vdot(K.adjoint() @ v * w, u)
    assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("c", [0.2, 0.1, 0.05])
def test_norm_of_sqrt_x_multiplier(c):
    g = GridSpec.uniform(c / 16, c, 24, -0.3, 0.3, 8)
    xs, _ = g.mesh()
    est = operator_norm_probe(KernelMatrix.multiplication(g, np.sqrt(xs)), probe_count=400)
    assert est == pytest.approx(np.sqrt(c), rel=1e-6)


def test_weighted_norm_of_constant():
    g = GridSpec.uniform(0.1, 0.2, 6, 0, 1, 5)
    assert weighted_norm(g, np.ones(g.size)) ** 2 == pytest.approx(g.measure_weights().sum())


def test_composition_remainder_shrinks_with_order():
    g = GridSpec(np.linspace(0.02, 0.2, 64), np.array([0.0]))
    xs, _ = g.mesh()
    u = np.exp(-((xs - 0.11) / 0.02) ** 2)
    A = SymbolField(lambda x, y, xi, eta: np.exp(-xi ** 2 / 4) + 0j)
    B = SymbolField(lambda x, y, xi, eta: np.exp(x) * (1 + 1j * xi) * np.exp(-xi ** 2 / 6))
    exact = quantize(A, g) @ (quantize(B, g) @ u)
    rem = [np.linalg.norm(exact - quantize(compose_symbols(A, B, N), g) @ u) / np.linalg.norm(exact)
           for N in (1, 2, 3)]
    assert rem[0] > 1.7 * rem[1] > 1.7 ** 2 * rem[2]
