import numpy as np
import pytest

from factories import scalar_investment
from robust_smp.errors import GridTooLarge, InadmissibleControl
from robust_smp.investment import build_investment_model, solve_theta_star
from robust_smp.model import Box, LqFamilySpec, build_lq_model
from robust_smp.oracle import (ControlGrid, brute_force_minimum, certify_candidate, coordinate_descent,
                               enumerate_adapted_controls)
from robust_smp.path_space import AdaptedProcess, build_path_space, fair_coin
from robust_smp.robust import AmbiguitySet, robust_cost

coin1 = build_path_space(fair_coin(1))
coin2 = build_path_space(fair_coin(2))
one = AmbiguitySet.simplex(1)


def scalar_lq(N, boxes=None, x0=0.0, **entries):
    spec = LqFamilySpec.zeros(1, N, 1, 1, 1)
    spec = spec.replace(**{k: np.full_like(getattr(spec, k), v) for k, v in entries.items()})
    return build_lq_model(spec, [x0], boxes)


def one_step():
    # x(1) = 1 + u, cost u^2/2 + x(1)^2/2, minimized at u = -1/2 with value 1/4
    return scalar_lq(1, x0=1.0, A=1.0, B=1.0, R=1.0, S=1.0)


def test_counts():
    model = scalar_lq(1)
    grid = ControlGrid.uniform(coin1, model, -1.0, 1.0, 3)
    assert grid.count == 3
    assert [float(u[0][0, 0]) for u in enumerate_adapted_controls(coin1, grid)] == [-1.0, 0.0, 1.0]
    assert ControlGrid.uniform(coin2, scalar_lq(2), -1.0, 1.0, 3).count == 27


def test_enumeration_order_last_slot_fastest():
    grid = ControlGrid.uniform(coin2, scalar_lq(2), -1.0, 1.0, 3)
    controls = list(enumerate_adapted_controls(coin2, grid))
    assert len(controls) == 27
    np.testing.assert_array_equal(controls[1][1][:, 0], [-1.0, 0.0])
    np.testing.assert_array_equal(controls[3][1][:, 0], [0.0, -1.0])
    assert controls[9][0][0, 0] == 0.0


def test_cap():
    ps = build_path_space(fair_coin(3))
    grid = ControlGrid.uniform(ps, scalar_lq(3), -1.0, 1.0, 41)
    with pytest.raises(GridTooLarge):
        brute_force_minimum(ps, scalar_lq(3), one, grid)
    with pytest.raises(GridTooLarge):
        next(enumerate_adapted_controls(ps, grid))


def test_grid_must_be_admissible():
    model = scalar_lq(1, boxes=[Box([0.0], [1.0])])
    with pytest.raises(InadmissibleControl):
        ControlGrid.uniform(coin1, model, -1.0, 1.0, 3)


def test_quadratic_control_cost():
    result = brute_force_minimum(coin1, scalar_lq(1, R=1.0), one, ControlGrid.uniform(coin1, scalar_lq(1), -1, 1, 3))
    assert result.best_control[0][0, 0] == 0.0
    assert result.best_value == 0.0
    assert result.evaluated == 3


def test_one_step_lq_closed_form():
    model = one_step()
    result = brute_force_minimum(coin1, model, one, ControlGrid.uniform(coin1, model, -1.0, 1.0, 41))
    assert result.best_control[0][0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert result.best_value == pytest.approx(0.25, abs=1e-15)


def test_ties_go_to_earliest_index():
    # zero model: every control costs 0
    result = brute_force_minimum(coin2, scalar_lq(2), one, ControlGrid.uniform(coin2, scalar_lq(2), -1, 1, 3),
                                 threads=4, chunk=5)
    assert result.best_index == 0


def test_threading_does_not_change_result():
    spec = scalar_investment()
    model = build_investment_model(spec)
    amb = AmbiguitySet.simplex(2)
    grid = ControlGrid.uniform(coin2, model, -1.0, 1.0, 9)
    a = brute_force_minimum(coin2, model, amb, grid, threads=1, chunk=64)
    b = brute_force_minimum(coin2, model, amb, grid, threads=4, chunk=64)
    c = brute_force_minimum(coin2, model, amb, grid, threads=3, chunk=1000)
    assert a.best_index == b.best_index == c.best_index
    assert a.best_value == b.best_value == c.best_value


def test_certify_best_control_passes_with_zero_margin():
    model = one_step()
    grid = ControlGrid.uniform(coin1, model, -1.0, 1.0, 41)
    best = brute_force_minimum(coin1, model, one, grid).best_control
    report = certify_candidate(coin1, model, one, grid, best)
    assert report.passed and report.margin == 0.0
    assert report.max_spacings_from_best == 0.0
    assert "certification: pass" in report.summary()


def test_certify_shifted_candidate_fails():
    model = one_step()
    grid = ControlGrid.uniform(coin1, model, -1.0, 1.0, 41)
    shifted = AdaptedProcess(0, [np.array([[-0.45]])])
    report = certify_candidate(coin1, model, one, grid, shifted, slack=1e-6)
    # curvature 2 over one 0.05 step: cost rises by 0.05^2 = 0.0025
    assert not report.passed
    assert report.candidate_value - report.grid_value == pytest.approx(0.0025, abs=1e-12)


def test_investment_candidate_certified():
    spec = scalar_investment()
    model = build_investment_model(spec)
    amb = AmbiguitySet.simplex(2)
    sol = solve_theta_star(coin2, spec)
    grid = ControlGrid.around(coin2, model, sol.control, 1.0, 41)
    assert grid.count == 41 ** 3
    report = certify_candidate(coin2, model, amb, grid, sol.control, slack=1e-6)
    assert report.passed
    assert report.grid_value >= robust_cost(coin2, model, amb, sol.control)[0] - 1e-6
    assert report.max_spacings_from_best <= 1.0


def test_refinement_is_monotone():
    spec = scalar_investment()
    model = build_investment_model(spec)
    amb = AmbiguitySet.simplex(2)
    values = [brute_force_minimum(coin2, model, amb, ControlGrid.uniform(coin2, model, -1.0, 1.0, p)).best_value
              for p in (3, 5, 9, 17)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_coordinate_descent_reaches_separable_optimum():
    model = scalar_lq(2, R=1.0, r=0.3)
    grid = ControlGrid.uniform(coin2, model, -1.0, 1.0, 21)
    u, value = coordinate_descent(coin2, model, one, grid)
    exact = brute_force_minimum(coin2, model, one, grid)
    assert value == pytest.approx(exact.best_value, abs=1e-15)
    assert u.max_abs_diff(exact.best_control) == 0.0


def test_per_stage_bounds_and_spacing():
    grid = ControlGrid.from_bounds(coin2, scalar_lq(2), [[-1.0], [0.0]], [[1.0], [2.0]], 5)
    np.testing.assert_allclose(grid.spacing(), 0.5)
    assert list(grid.slots[0]) == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert list(grid.slots[2]) == [0.0, 0.5, 1.0, 1.5, 2.0]
