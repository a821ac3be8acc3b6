import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from bbcalc.dynamics import (Hamiltonian, ParaboloidChart, RayQuadrature,
                             _arcsine_moments, convexity_check, decay_lemma_check, euclidean,
                             exact_rays, flow, normal_operator_apply, normal_operator_matrix,
                             qsh, ray_bundle)
from bbcalc.dynamics import TestWeight as Weight
from bbcalc.recover import RecoveryProblem


@pytest.fixture(scope="module")
def small():
    return RecoveryProblem.default(c=0.05, n=12)


def test_flow_conserves_energy():
    q0 = np.array([[0.1, -0.2, 0.3]])
    p0 = np.array([[0.4, 0.1, -0.7]])
    tr = flow(qsh(2.0, 0.5), q0, p0, 1.0, 400)
    assert tr.energy_drift[0] < 1e-10


def test_euclidean_flow_is_straight():
    q0 = np.zeros((1, 3))
    p0 = np.array([[0.5, 0.0, 0.0]])
    tr = flow(euclidean(), q0, p0, 2.0, 50)
    # dq/dt = 2p
    assert np.allclose(tr.q[-1], [[2.0, 0.0, 0.0]])


def test_flow_rejects_zero_momentum():
    with pytest.raises(ValueError):
        flow(euclidean(), np.zeros((1, 3)), np.zeros((1, 3)), 1.0)


def test_numeric_metric_derivative_matches_analytic():
    H = qsh(2.0, 0.5)
    numeric = Hamiltonian(H.metric)
    q = np.random.default_rng(1).normal(size=(5, 3))
    p = np.random.default_rng(2).normal(size=(5, 3))
    for a, b in zip(H.rhs(q, p), numeric.rhs(q, p)):
        assert np.allclose(a, b, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.001, 0.05), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_chart_round_trip(x, y1, y2):
    chart = ParaboloidChart(0.25, 0.05, 3)
    z = chart.from_chart(np.array([x]), np.array([[y1, y2]]))
    xb, yb = chart.to_chart(z)
    assert xb[0] == pytest.approx(x, abs=1e-14)
    assert np.allclose(yb, [[y1, y2]])


def test_exact_rays_match_flowed_rays():
    chart = ParaboloidChart(0.25, 0.05, 3)
    x0, lam = 0.02, 0.3
    bundle = ray_bundle(euclidean(), chart, (x0, [0.0, 0.0]), [lam], [0.0], np.linspace(-2, 2, 9))
    xe, ye = exact_rays(chart, x0, 0.0, lam, 1.0, bundle.t_hat)
    assert np.allclose(bundle.x_traj[0, 0], xe, atol=1e-9)
    assert np.allclose(bundle.alpha, chart.kappa, rtol=1e-5)


def test_paraboloid_level_sets_are_convex():
    rep = convexity_check(ParaboloidChart(0.25, 0.05, 3), euclidean(), samples=40)
    assert rep["convex"]
    assert rep["alpha_within_1pct"]


@pytest.mark.parametrize("k", range(5))
def test_arcsine_moments_against_quadrature(k):
    c = np.array([2.7, -1.3, 0.6])
    got = _arcsine_moments(c, 3, 4)
    for t, ct in enumerate(c):
        for j in range(-3, 4):
            tent = lambda u: max(0.0, 1.0 - abs(ct * u - j))
            f = lambda th: np.cos(th) ** k * tent(np.cos(th))
            # u = cos(theta) removes the endpoint singularity; split at the tent kinks
            u = (j + np.array([-1.0, 0.0, 1.0])) / ct
            kinks = np.arccos(u[np.abs(u) < 1])
            ref, _ = quad(f, 0, np.pi, limit=200, points=kinks, epsabs=1e-13, epsrel=1e-12)
            assert got[t, k, j + 3] == pytest.approx(ref, abs=1e-9)


def test_exact_and_node_assembly_agree(small):
    g = small.grid
    xs, ys = g.mesh()
    f = np.exp(-((xs - 0.03) / 0.01) ** 2 - (ys / 0.1) ** 2)
    exact = normal_operator_matrix(g, small.chart, small.weight, angular="exact")
    nodes = normal_operator_matrix(g, small.chart, small.weight, angular="nodes")
    a, b = exact.entries @ f, nodes.entries @ f
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 5e-3
    assert exact.meta["angular_residual"] < 1e-10


def test_matrix_close_to_direct_quadrature(small):
    g = small.grid
    bump = lambda x, y: np.exp(-((x - 0.03) / 0.01) ** 2 - (y / 0.1) ** 2)
    xs, ys = g.mesh()
    M = normal_operator_matrix(g, small.chart, small.weight)
    direct = normal_operator_apply(g, small.chart, small.weight, bump)
    # bilinear interpolation on a 12x12 grid limits the match
    assert np.linalg.norm(M.entries @ bump(xs, ys) - direct) / np.linalg.norm(direct) < 0.1


def test_zero_weight_gives_zero_operator(small):
    zero = Weight(scale=0.0, c=small.chart.c)
    M = normal_operator_matrix(small.grid, small.chart, zero)
    assert not np.any(M.entries)


def test_unknown_angular_mode(small):
    with pytest.raises(ValueError):
        normal_operator_matrix(small.grid, small.chart, small.weight, angular="spline")


def test_decay_lemma_on_assembly(small):
    reports = []
    normal_operator_matrix(small.grid, small.chart, small.weight, decay=reports)
    assert len(reports) == small.grid.nx
    assert all(r["holds"] for r in reports)
    assert all(r["c1_branch_small_t"] > 0 for r in reports)


def test_decay_lemma_flags_violation():
    lam = np.array([0.0, 0.0, 1.0])
    t = np.array([0.1, 0.2, 0.0])
    lhs = np.array([0.01, -0.04, 1.0])
    rep = decay_lemma_check(0.01, lam, t, lhs, 0.25)
    assert not rep["holds"]


def test_quadrature_refine_doubles():
    q = RayQuadrature.default()
    r = q.refine()
    assert len(r.mu) == 2 * len(q.mu)
    assert len(r.t) == 2 * len(q.t)
    assert q.t_w.sum() == pytest.approx(2 * q.t_max)
