import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bbcalc.geometry import CotangentPoint, defining_functions
from bbcalc.symbols import (SymbolField, SymbolOrder, estimate_order, includes, is_elliptic,
                            near_sigma_samples, parse_order, reciprocal_symbol,
                            structural_ellipticity_check, type_half_slopes, weight)

P = CotangentPoint(0.25, (0.0,), 0.0, (math.sqrt(3),))


@pytest.mark.parametrize("order,want", [
    (SymbolOrder(), 1.0),
    (SymbolOrder(-1, 0, -2, -2), 0.1875),
])
def test_weight_examples(order, want):
    assert float(weight(P, order)[0]) == pytest.approx(want)


def test_weight_rho_quarter():
    # rho = 1/4 at |zeta|^2 = 15
    p = CotangentPoint(0.5, (0.0,), 0.0, (math.sqrt(15),))
    assert float(weight(p, SymbolOrder(1, 0, 0, 0))[0]) == pytest.approx(4.0)


def test_weight_flags_boundary():
    p = CotangentPoint(0.0, (0.0,), 1.0, (1.0,))
    w, flag = weight(p, SymbolOrder(0, 1, 0, 0), return_flag=True)
    assert np.isinf(w[0]) and flag[0]


def test_order_literals():
    o = parse_order(["-1", "1/2", "0", "3/4"])
    assert o.as_tuple() == (-1, Fraction(1, 2), 0, Fraction(3, 4))
    with pytest.raises(ValueError):
        parse_order(["1/0", "0", "0", "0"])
    with pytest.raises(ValueError):
        parse_order(["0", "0", "0"])


@pytest.mark.parametrize("o1,o2,want", [
    ((0, 0, 2, 0), (1, 0, 0, 0), "proved"),
    ((-1, -1, -1, -1), ("-1/2", "-1/2", 0, 0), "proved"),
    ((0, 0, 0, 0), (-1, 0, 0, 0), "unknown"),
    ((0, -1, 0, 0), (0, 0, 0, -2), "proved"),
])
def test_inclusion_examples(o1, o2, want):
    assert includes(SymbolOrder(*o1), SymbolOrder(*o2)) == want


quarter = st.integers(-8, 8).map(lambda v: Fraction(v, 4))
orders = st.builds(SymbolOrder, quarter, quarter, quarter, quarter)


@given(orders, st.tuples(*[st.integers(0, 4)] * 4))
def test_raising_orders_is_proved(o, inc):
    bigger = o + SymbolOrder(*(Fraction(v, 4) for v in inc))
    assert includes(o, bigger) == "proved"


@given(orders, st.integers(0, 3), st.integers(1, 8))
def test_lowering_one_index_is_never_proved(o, idx, step):
    low = [0, 0, 0, 0]
    low[idx] = Fraction(step, 4)
    assert includes(o, o - SymbolOrder(*low)) == "unknown"


@given(orders, orders)
def test_grid_search_is_sound(o1, o2):
    # the grid answer can only be weaker than the exact interval answer
    if includes(o1, o2) == "proved":
        assert includes(o1, o2, grid=None) == "proved"


def _f(fn):
    return lambda x, y, xi, eta: fn(defining_functions(x, y, xi, eta))


def test_estimate_order_of_x():
    est = estimate_order(_f(lambda d: d.xval))
    assert est.order == pytest.approx((0, -1, 0, 0), abs=0.1)
    assert est.within(SymbolOrder(0, -1, 0, 0))


def test_estimate_order_of_tau():
    est = estimate_order(_f(lambda d: d.tau[:, 0]))
    assert est.order == pytest.approx((0, 0, -1, -1), abs=0.1)


def test_estimate_order_of_product_is_subadditive():
    f = _f(lambda d: d.rho * d.d_sigma ** 2)
    g = _f(lambda d: d.xval)
    fg = _f(lambda d: d.rho * d.d_sigma ** 2 * d.xval)
    ef, eg, efg = (estimate_order(h).order for h in (f, g, fg))
    assert all(c <= a + b + 0.1 for a, b, c in zip(ef, eg, efg))


def test_type_half_bound_for_tau_tilde():
    rows = type_half_slopes(_f(lambda d: d.tau_tilde[:, 0]), 0, 0)
    assert rows and all(r["passed"] for r in rows)


def test_is_elliptic_examples():
    s = near_sigma_samples(500, seed=2)
    o = SymbolOrder(-1, 0, -2, -2)
    w = SymbolField(lambda x, y, xi, eta: weight((x, y, xi, eta), o), o)
    assert is_elliptic(w, s) == pytest.approx(1.0)
    mod = SymbolField(lambda x, y, xi, eta: weight((x, y, xi, eta), o) * (1 + 0.5 * np.sin(y[:, 0])), o)
    # the infimum is attained at the sampled y with the smallest sin y
    assert is_elliptic(mod, s) == pytest.approx(1 + 0.5 * np.sin(s[1][:, 0]).min(), rel=1e-12)
    with pytest.raises(ValueError):
        is_elliptic(w, None)


def test_degenerate_leading_term_is_not_elliptic():
    o = SymbolOrder(-1, 0, 0, 0)
    f = SymbolField(lambda x, y, xi, eta: np.sum(defining_functions(x, y, xi, eta).tau ** 2, 1)
                    * defining_functions(x, y, xi, eta).rho, o)
    s = near_sigma_samples(4000, seed=0)
    assert is_elliptic(f, s) < 1e-6


def test_reciprocal_of_scaled_weight():
    o = SymbolOrder(-1, 0, -2, -2)
    f = SymbolField(lambda x, y, xi, eta: 2 * weight((x, y, xi, eta), o), o)
    s = near_sigma_samples(300, seed=4)
    q = reciprocal_symbol(f, lambda x, y, xi, eta: np.ones_like(x), samples=s)
    assert q.claimed_order == -o
    assert is_elliptic(q, s) == pytest.approx(0.5)


def test_reciprocal_refuses_non_elliptic():
    f = SymbolField(lambda x, y, xi, eta: np.zeros_like(x), SymbolOrder())
    with pytest.raises(ValueError):
        reciprocal_symbol(f, lambda *a: np.ones_like(a[0]), samples=near_sigma_samples(50))


def test_structural_check_with_subprincipal_term():
    s = near_sigma_samples(4000, n=2)
    a1 = lambda x, y, t: np.sum(t ** 2, axis=1)
    one = lambda x, y, t: np.ones_like(x)
    rep = structural_ellipticity_check(a1, one, one, s)
    assert rep["c"] > 0 and not rep["failures"]
    assert rep["branch_rho_tilde_ge_half"] > 0


def test_structural_check_needs_subprincipal_term():
    # on the degenerate set with rho >> x the bound collapses without a~
    a1 = lambda x, y, t: np.sum(t ** 2, axis=1)
    one = lambda x, y, t: np.ones_like(x)
    zero = lambda x, y, t: np.zeros_like(x)
    from bbcalc.geometry import fiber_from_blowup
    rho = np.logspace(-2, -7, 11)
    xi, eta = fiber_from_blowup(rho, np.zeros((11, 1)))
    pts = (np.full(11, 1e-2), np.zeros((11, 1)), xi, eta)
    without = structural_ellipticity_check(a1, zero, one, pts)
    with_ = structural_ellipticity_check(a1, one, one, pts)
    assert without["failures"]
    assert without["c"] < 1e-3 * with_["c"]
