import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import i0

from bbcalc.dynamics import ParaboloidChart
from bbcalc.dynamics import TestWeight as Weight
from bbcalc.normalop import finite_point_symbol, gaussian_moment, ray_symbol


def unit(x, y, lam, om, t):
    return np.ones(np.shape(om)[:-1])


@pytest.mark.parametrize("alpha, F, expected", [
    (1.0, 1.0, math.sqrt(2 * math.pi)),
    (4.0, 1.0, 8 * math.sqrt(2 * math.pi)),
    (1.0, 2.0, 2 * math.sqrt(math.pi)),
])
def test_gaussian_moment(alpha, F, expected):
    numeric, closed = gaussian_moment(alpha, F)
    assert closed == pytest.approx(expected, rel=1e-14)
    assert numeric == pytest.approx(expected, rel=1e-10)


def test_boundary_symbol_anchor():
    val = finite_point_symbol(unit, 1.0, 1.0, [0.0], [[0.0, 0.0]])
    assert val == pytest.approx(2 * math.pi ** 2, rel=1e-12)


@pytest.mark.parametrize("xi, eta", [(0.0, 1.0), (3.0, 1.0), (1.0, 2.5)])
def test_boundary_symbol_against_bessel(xi, eta):
    # int exp(-b cos^2) over the circle = 2 pi exp(-b/2) I0(b/2)
    alpha, F = 0.25, 1.0
    q = xi ** 2 + F ** 2
    b = F * eta ** 2 / (2 * alpha * q)
    expected = math.pi / math.sqrt(q) * 2 * math.pi * math.exp(-b / 2) * i0(b / 2)
    got = finite_point_symbol(unit, alpha, F, [xi], [[eta, 0.0]])
    assert got == pytest.approx(expected, rel=1e-12)


def test_boundary_symbol_decays_like_inverse_xi():
    xi = np.array([1e3, 2e3, 4e3])
    vals = finite_point_symbol(unit, 0.25, 1.0, xi, [[0.0, 0.0]])
    slopes = np.diff(np.log(vals)) / np.diff(np.log(xi))
    assert np.allclose(slopes, -1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
       st.floats(0.0, 2.0), st.floats(-0.9, 0.9))
def test_boundary_symbol_positive_for_nonnegative_weight(xi, e1, e2, s, tilt):
    A = Weight(s=s, tilt=tilt, T=10.0)
    val = finite_point_symbol(A, 0.25, 1.0, [xi], [[e1, e2]])
    assert val > 0


def test_ray_symbol_tends_to_boundary_symbol():
    chart = ParaboloidChart(0.25, 0.05, 3)
    xi, eta = [0.0, 0.5, 3.0], [0.0, 0.0, 1.0]
    ref = finite_point_symbol(unit, 0.25, 1.0, xi, [[0, 0], [0, 0], [1.0, 0]])
    errs = []
    for x in (0.01, 0.005, 0.0025):
        vals = ray_symbol(chart, unit, 1.0, x, 0.0, xi, eta).values
        errs.append(np.max(np.abs(vals / ref - 1)))
    assert errs[-1] < 5e-3
    # the gap closes linearly in x
    assert errs[0] / errs[1] > 1.6 and errs[1] / errs[2] > 1.6
