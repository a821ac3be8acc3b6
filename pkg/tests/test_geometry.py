import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbcalc.geometry import (CotangentPoint, GeneratorVectorField, Target, apply_generator,
                             defining_functions, lift_identity_suite, random_cloud,
                             read_points_csv, write_points_csv)


def test_defining_functions_two_dimensional_example():
    d = defining_functions(CotangentPoint(0.25, (0.0,), 0.0, (math.sqrt(3),))).squeeze()
    assert d.rho == pytest.approx(0.5)
    assert d.tau == pytest.approx([0.0])
    assert d.d_sigma == pytest.approx(math.sqrt(0.5))
    assert d.tau_tilde == pytest.approx([0.0])
    assert d.d_gamma == pytest.approx(math.sqrt(0.75))


@pytest.mark.parametrize("x", [0.0, 0.3, 1.0])
def test_zero_frequency(x):
    d = defining_functions(CotangentPoint(x, (0.1, 0.2), 0.0, (0.0, 0.0))).squeeze()
    assert d.rho == 1.0 and d.d_sigma == 1.0 and d.rho_tilde == 1.0
    assert np.all(d.tau == 0) and np.all(d.tau_tilde == 0)


def test_three_dimensional_substitution():
    d = defining_functions(CotangentPoint(0.1, (0.0, 0.0), 3.0, (4.0, 0.0))).squeeze()
    rho = 26 ** -0.5
    assert d.rho == pytest.approx(rho)
    assert d.tau == pytest.approx([3 * rho, 0.0])
    assert d.d_sigma == pytest.approx(math.sqrt(9 * rho ** 2 + rho))


def test_nan_rejected():
    with pytest.raises(ValueError):
        CotangentPoint(0.1, (0.0,), float("nan"), (1.0,))
    with pytest.raises(ValueError):
        defining_functions(np.array([0.1]), None, np.array([np.nan]), np.array([[1.0]]))


def _pt(x, xi, eta):
    return CotangentPoint(x, tuple(0.0 for _ in eta), xi, tuple(eta)).arrays()


@pytest.mark.parametrize("exact", [True, False])
def test_rho_drho_of_dsigma_on_the_axis(exact):
    p = _pt(0.2, 0.0, (2.0,))
    got = apply_generator(GeneratorVectorField("rho_drho"), Target("d_sigma"), p, exact=exact)
    d = defining_functions(*p)
    assert got == pytest.approx(0.5 * d.d_sigma, rel=1e-7)


@pytest.mark.parametrize("exact", [True, False])
def test_x_dx_of_x_over_dgamma2(exact):
    p = _pt(0.37, 1.3, (0.4, -0.7))
    got = apply_generator(GeneratorVectorField("x_dx2"), Target("x_over_dg2"), p, exact=exact)
    d = defining_functions(*p)
    r = d.xval / d.d_gamma ** 2
    assert got == pytest.approx(r * (1 - r), rel=1e-7)


@pytest.mark.parametrize("i,j,want", [(0, 0, 1.0), (1, 0, 0.0), (1, 1, 1.0)])
def test_dgamma_dttil_at_the_center(i, j, want):
    p = _pt(0.3, 0.0, (1.5, 0.0))
    got = apply_generator(GeneratorVectorField("dg_dttil", j=j), Target("ttil_over_dg", i), p,
                          exact=False)
    assert got == pytest.approx([want], abs=1e-8)


def test_rho_drho_of_tau_tilde_vanishes_at_center():
    p = _pt(0.3, 0.0, (1.5,))
    got = apply_generator(GeneratorVectorField("rho_drho"), Target("tau_tilde", 0), p, exact=False)
    assert got == pytest.approx([0.0], abs=1e-9)


def test_identity_suite_on_small_cloud():
    report = lift_identity_suite(count=200, n=3, seed=3)
    assert report and all(r["passed"] for r in report)
    assert {r["points_tested"] for r in report} == {200}


def test_unknown_generator():
    with pytest.raises(ValueError):
        GeneratorVectorField("d_zeta")


def test_points_csv_round_trip(tmp_path):
    pts = random_cloud(25, 3, seed=1)
    write_points_csv(pts, tmp_path / "p.csv")
    back = read_points_csv(tmp_path / "p.csv")
    for a, b in zip(pts, back):
        np.testing.assert_array_equal(np.asarray(a).reshape(np.shape(b)), b)


fin = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0, 1), xi=fin, e1=fin, e2=fin)
def test_defining_function_invariants(x, xi, e1, e2):
    d = defining_functions(np.array([x]), None, np.array([xi]), np.array([[e1, e2]]))
    tau2 = float(np.sum(d.tau ** 2))
    assert d.d_sigma[0] == pytest.approx(math.sqrt(tau2 + d.rho[0]), rel=1e-12)
    assert float(np.sum(d.tau_tilde ** 2)) + d.rho_tilde[0] == pytest.approx(1.0, rel=1e-12)
    assert d.d_gamma[0] >= d.d_sigma[0] * (1 - 1e-12)
    assert d.d_gamma[0] >= math.sqrt(x) * (1 - 1e-12)
    assert d.d_sigma[0] >= math.sqrt(d.rho[0]) * (1 - 1e-12)
