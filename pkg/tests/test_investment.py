import numpy as np
import pytest

from factories import mirrored, scalar_investment
from robust_smp.adjoint import solve_adjoint_recursive
from robust_smp.errors import BadSpec, ShapeMismatch
from robust_smp.investment import (InvestmentSpec, build_investment_model, closed_form_adjoint,
                                   evaluate_value_pair, optimal_portfolio, require_standardized,
                                   solve_theta_star, stationarity_gap)
from robust_smp.model import eval_costs, eval_dynamics
from robust_smp.path_space import NoiseSpec, build_path_space, fair_coin
from robust_smp.robust import AmbiguitySet, robust_cost, stationarity_residual

coin1 = build_path_space(fair_coin(1))
coin2 = build_path_space(fair_coin(2))


def test_zero_excess_return_drift():
    spec = scalar_investment(rate=0.1, mu=(0.1, 0.1))
    model = build_investment_model(spec)
    drift, _ = eval_dynamics(model, 0, 0, [2.0], [5.0])
    assert drift[0] == pytest.approx(2.2, abs=1e-15)


def test_hand_dynamics():
    spec = scalar_investment(N=1, rate=0.1, mu=(0.2, 0.2), beta=(0.3, 0.3))
    drift, diff = eval_dynamics(build_investment_model(spec), 1, 0, [1.0], [2.0])
    assert drift[0] == pytest.approx(1.3, abs=1e-15)
    assert diff[0, 0] == pytest.approx(0.6, abs=1e-15)


def test_cost_vanishes_at_benchmark():
    spec = scalar_investment(psi=0.4)
    assert eval_costs(build_investment_model(spec), 0, 1, [3.0], [0.4]) == 0.0


def test_spec_validation():
    with pytest.raises(BadSpec):
        scalar_investment(rate=-0.1)
    with pytest.raises(BadSpec):
        scalar_investment(G=(1.0, -1.0))
    with pytest.raises(BadSpec):
        scalar_investment(H=(0.0, 1.0))
    with pytest.raises(BadSpec):
        scalar_investment(x0=0.0)
    with pytest.raises(BadSpec):
        InvestmentSpec(2, 1, 1, [0.05, 0.05, 0.05], ([[0.1]] * 2,) * 2, ([[[0.1]]] * 2,) * 2,
                       ([[[1.0]]] * 2,) * 2, (1.0, 1.0), [[0.0]] * 2, 1.0)


def test_closed_form_adjoint_boundary_and_hand_product():
    spec1 = scalar_investment(N=1, H=(1.5, 2.5))
    assert closed_form_adjoint(spec1, coin1, 0).P[0][0, 0] == -1.5
    spec3 = scalar_investment(N=3, rate=0.1, H=(1.0, 1.0))
    adj = closed_form_adjoint(spec3, build_path_space(fair_coin(3)), 1)
    assert [float(adj.P[k][0, 0]) for k in range(3)] == pytest.approx([-1.21, -1.1, -1.0], abs=1e-15)
    with pytest.raises(ShapeMismatch):
        closed_form_adjoint(spec3, coin2, 0)


def test_closed_form_matches_generic_solver():
    spec = scalar_investment()
    model = build_investment_model(spec)
    u = optimal_portfolio(spec, 0.3, coin2)
    for g in range(2):
        generic = solve_adjoint_recursive(coin2, model, g, u)
        closed = closed_form_adjoint(spec, coin2, g)
        assert generic.P.max_abs_diff(closed.P) <= 1e-14
        assert generic.Q.max_abs_diff(closed.Q) <= 1e-14


def test_zero_excess_return_tracks_benchmark():
    spec = scalar_investment(mu=(0.05, 0.05), psi=0.3)
    for theta in (0.0, 0.4, 1.0):
        u = optimal_portfolio(spec, theta, coin2)
        for k in range(2):
            np.testing.assert_array_equal(u[k], 0.3)


def test_symmetric_weights_cancel():
    spec = scalar_investment(N=1, rate=0.1, mu=(0.2, 0.0), G=(1.0, 1.0), H=(1.0, 1.0), psi=0.0)
    assert optimal_portfolio(spec, 0.5, coin1)[0][0, 0] == pytest.approx(0.0, abs=1e-15)


def test_single_scenario_formula_at_theta_one():
    spec = scalar_investment(N=3, rate=0.04, mu=(0.12, -0.3), G=(2.0, 5.0), H=(1.5, 0.5), psi=0.1)
    ps = build_path_space(fair_coin(3))
    u = optimal_portfolio(spec, 1.0, ps)
    for k in range(3):
        expected = 0.1 + (0.12 - 0.04) * 1.5 / 2.0 * 1.04 ** (2 - k)
        np.testing.assert_allclose(u[k], expected, atol=1e-15)


def test_theta_range_and_two_stocks():
    spec = scalar_investment(N=1)
    with pytest.raises(ValueError):
        optimal_portfolio(spec, 1.5, coin1)
    m2 = InvestmentSpec(1, 2, 1, [0.05], ([[0.1, 0.2]], [[0.0, 0.1]]), ([[[0.1, 0.1]]], [[[0.2, 0.2]]]),
                        ([np.eye(2)], [np.eye(2)]), (1.0, 1.0), [[0.0, 0.0]], 1.0)
    u = optimal_portfolio(m2, 0.5, coin1)[0]
    # identity weights: each stock holds its averaged excess return times H
    np.testing.assert_allclose(u, [[0.5 * 0.05 - 0.5 * 0.05, 0.5 * 0.15 + 0.5 * 0.05]], atol=1e-15)


def test_deterministic_wealth_values():
    spec = scalar_investment(N=3, rate=0.05, mu=(0.05, 0.05), psi=0.0, H=(2.0, 3.0), x0=1.5)
    y = evaluate_value_pair(build_path_space(fair_coin(3)), spec, 0.5)
    assert y == pytest.approx((-2.0 * 1.5 * 1.05 ** 3, -3.0 * 1.5 * 1.05 ** 3), abs=1e-14)


def test_identical_scenarios_tie():
    spec = scalar_investment(mu=(0.1, 0.1), beta=(0.2, 0.2), G=(1.0, 1.0), H=(1.0, 1.0))
    for theta in np.linspace(0.0, 1.0, 5):
        y1, y2 = evaluate_value_pair(coin2, spec, theta)
        assert y1 == y2


def test_value_pair_is_lipschitz_in_theta():
    spec = scalar_investment()
    fine = np.linspace(0.0, 1.0, 21)
    yf = np.array([evaluate_value_pair(coin2, spec, t) for t in fine])
    assert np.all(np.isfinite(yf))
    C = np.max(np.abs(np.diff(yf, axis=0))) / (fine[1] - fine[0])
    assert C < 1.0
    pts = [0.0, 0.5, 1.0]
    ys = [np.array(evaluate_value_pair(coin2, spec, t)) for t in pts]
    for i in range(3):
        for j in range(i):
            assert np.max(np.abs(ys[i] - ys[j])) <= C * abs(pts[i] - pts[j]) + 1e-15


def test_case_one_and_mirror_case_two():
    # a large terminal weight lowers that scenario's cost, so the heavy scenario is never the worst case
    heavy_bear = scalar_investment(H=(1.0, 10.0), mu=(0.0, 0.15), beta=(0.3, 0.2), G=(2.0, 1.0))
    one = solve_theta_star(coin2, heavy_bear)
    assert one.case_label == "Case1" and one.theta_star == 1.0 and one.g_at_1 >= 0
    two = solve_theta_star(coin2, mirrored(heavy_bear))
    assert two.case_label == "Case2" and two.theta_star == 0.0 and two.g_at_0 <= 0
    assert one.theta_star + two.theta_star == 1.0


def test_case_three_bisection():
    spec = scalar_investment()
    sol = solve_theta_star(coin2, spec)
    assert sol.case_label == "Case3"
    assert sol.g_at_0 > 0 > sol.g_at_1
    assert abs(sol.gap) <= 1e-6
    assert sol.theta_star == pytest.approx(0.97618455812335, abs=1e-8)
    lam = [sol.theta_star, 1.0 - sol.theta_star]
    table = stationarity_residual(coin2, build_investment_model(spec), AmbiguitySet.simplex(2), sol.control, lam)
    assert table.max_residual <= 1e-8
    value, _ = robust_cost(coin2, build_investment_model(spec), AmbiguitySet.simplex(2), sol.control)
    assert value == pytest.approx(max(sol.value_pair), abs=1e-9)
    mirror = solve_theta_star(coin2, mirrored(spec))
    assert mirror.theta_star + sol.theta_star == pytest.approx(1.0, abs=1e-8)
    assert "case: Case3" in sol.report()


def test_stationarity_on_theta_grid():
    spec = scalar_investment()
    for theta in np.linspace(0.0, 1.0, 11):
        assert stationarity_gap(spec, coin2, theta, optimal_portfolio(spec, theta, coin2)) <= 1e-10


def test_non_standardized_noise_is_rejected():
    ps = build_path_space(NoiseSpec.iid(2, np.array([[2.0], [-1.0]]), np.array([1 / 3, 2 / 3])))
    with pytest.raises(BadSpec):
        require_standardized(ps)
    with pytest.raises(BadSpec):
        solve_theta_star(ps, scalar_investment())
