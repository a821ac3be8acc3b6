import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbcalc.quantize import GridSpec, weighted_norm
from bbcalc.recover import (BumpTruth, Operators, RecoveryProblem, assemble_normal_operators,
                            build_error_operator, derivative_matrices, elliptic_combination,
                            galerkin_inverse, read_bbg1, recover, synthetic_data, trial_basis,
                            write_bbg1)


@pytest.fixture(scope="module")
def pipeline():
    c = 0.05
    prob = RecoveryProblem.default(c=c, n=16, truth=BumpTruth(0.6 * c, 0.0, 0.3 * c, 0.6 * np.sqrt(c)))
    ops = Operators(*assemble_normal_operators(prob))
    build_error_operator(prob, ops)
    elliptic_combination(prob, ops)
    return prob, ops


def _grid(n):
    return GridSpec.uniform(0.1, 1.0, n, -1.0, 1.0, n)


def test_derivatives_exact_on_quartics():
    g = _grid(9)
    xs, ys = g.mesh()
    Dx, Dy = derivative_matrices(g)
    f = xs ** 4 - 2 * xs * ys ** 3 + ys ** 2
    assert np.allclose(Dx @ f, 4 * xs ** 3 - 2 * ys ** 3, atol=1e-10)
    assert np.allclose(Dy @ f, -6 * xs * ys ** 2 + 2 * ys, atol=1e-10)


def test_derivatives_fourth_order():
    errs = []
    for n in (17, 33, 65):
        g = _grid(n)
        xs, ys = g.mesh()
        Dx, _ = derivative_matrices(g)
        errs.append(np.max(np.abs(Dx @ np.sin(3 * xs) - 3 * np.cos(3 * xs))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.5)


def test_derivatives_need_five_nodes():
    with pytest.raises(ValueError):
        derivative_matrices(_grid(4))


def test_bump_derivatives():
    b = BumpTruth(0.5, 0.1, 0.3, 0.4, amp=2.0)
    x, y, h = np.array([0.45, 0.6]), np.array([0.0, 0.3]), 1e-6
    assert np.allclose(b.dx(x, y), (b(x + h, y) - b(x - h, y)) / (2 * h), atol=1e-6)
    assert np.allclose(b.dy(x, y), (b(x, y + h) - b(x, y - h)) / (2 * h), atol=1e-6)
    assert b(0.9, 0.1) == 0.0


def test_check_support_rejects_leaking_truth():
    c = 0.05
    prob = RecoveryProblem.default(c=c, n=8, truth=BumpTruth(c, 0.0, 0.3 * c, 0.1))
    with pytest.raises(ValueError, match="working region"):
        prob.check_support()
    RecoveryProblem.default(c=c, n=8, truth=BumpTruth(0.5 * c, 0.0, 0.2 * c, 0.1)).check_support()


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(2, 6), ny=st.integers(2, 6), seed=st.integers(0, 2 ** 31))
def test_bbg1_round_trip(nx, ny, seed, tmp_path_factory):
    g = GridSpec.uniform(0.1, 1.0, nx, -1.0, 1.0, ny)
    v = np.random.default_rng(seed).normal(size=g.size)
    path = tmp_path_factory.mktemp("bbg") / "f.bbg1"
    write_bbg1(path, g, v)
    back = read_bbg1(path)
    assert back.shape == (nx, ny)
    assert np.array_equal(back.ravel(), v.astype(np.float32).astype(np.float64))


def test_bbg1_rejects_garbage(tmp_path):
    bad = tmp_path / "x.bbg1"
    bad.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_bbg1(bad)
    g = _grid(5)
    write_bbg1(bad, g, np.zeros(g.size))
    bad.write_bytes(bad.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_bbg1(bad)


def test_galerkin_inverse_on_subspace():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(12, 12)) + 12 * np.eye(12)
    V, _ = np.linalg.qr(rng.normal(size=(12, 5)))
    Q = galerkin_inverse(A, V)
    assert np.allclose(V.T @ (Q @ A - np.eye(12)) @ V, 0, atol=1e-12)


def test_trial_basis_excludes_top_row(pipeline):
    prob, ops = pipeline
    V = ops.V
    assert np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-12)
    top = prob.grid.nx - 1
    assert not np.any(V.reshape(prob.grid.nx, prob.grid.ny, -1)[top])
    assert np.array_equal(V, trial_basis(prob))


def test_error_operator_vanishes_on_trial_space(pipeline):
    prob, ops = pipeline
    assert np.linalg.norm(ops.R @ ops.V, 2) < 1e-8
    assert ops.meta["parametrix_method"] == "galerkin"


def test_zero_data_recovers_zero(pipeline):
    prob, ops = pipeline
    zero = np.zeros(prob.grid.size)
    res = recover(prob, (zero, zero), ops)
    assert res.converged
    assert not np.any(res.f)


def test_iteration_reaches_fixed_point(pipeline):
    prob, ops = pipeline
    data = synthetic_data(prob, ops, "matrix")
    res = recover(prob, data, ops, max_iter=400, tol=1e-12)
    xs, _ = prob.grid.mesh()
    rhs = ops.P[0] @ (xs ** 2 * (ops.Q @ data[0])) + ops.P[1] @ (xs * (ops.Q @ data[1]))
    g = ops.V.T @ (ops.Bp @ rhs)
    fb = ops.V.T @ res.f
    assert res.converged
    assert np.linalg.norm(fb - (g - ops.GV @ fb)) <= 1e-9 * np.linalg.norm(g)


def test_unknown_methods_raise(pipeline):
    prob, ops = pipeline
    with pytest.raises(ValueError):
        synthetic_data(prob, ops, "telepathy")
    with pytest.raises(ValueError):
        build_error_operator(prob, Operators(ops.N, ops.Nt), method="magic")


def test_weighted_norm_scales():
    g = _grid(6)
    v = np.random.default_rng(0).normal(size=g.size)
    assert weighted_norm(g, 3 * v) == pytest.approx(3 * weighted_norm(g, v))
