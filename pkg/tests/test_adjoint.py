import numpy as np
import pytest

from factories import random_control, random_instance
from robust_smp.adjoint import (duality_residual, duality_sides, hamiltonian_eval, hamiltonian_gradients,
                                hamiltonian_u_gradient, solve_adjoint_explicit, solve_adjoint_recursive,
                                stagewise_duality_gaps)
from robust_smp.dynamics import linearize
from robust_smp.errors import ShapeMismatch
from robust_smp.investment import InvestmentSpec, build_investment_model, closed_form_adjoint
from robust_smp.model import LqFamilySpec, build_lq_model, eval_costs
from robust_smp.path_space import AdaptedProcess, build_path_space, fair_coin


def investment(N=1, e=0.1, mu=0.2, beta=0.3, H=1.0):
    return InvestmentSpec(N, 1, 1, [e] * N, ([[mu]] * N, [[mu]] * N), ([[[beta]]] * N, [[[beta]]] * N),
                          ([[[1.0]]] * N, [[[1.0]]] * N), (H, H), [[0.0]] * N, 1.0)


def test_constant_propagation():
    N, n = 3, 2
    c = np.array([1.5, -0.5])
    spec = LqFamilySpec.zeros(1, N, n, 1, 1)
    spec = spec.replace(A=np.broadcast_to(np.eye(n), spec.A.shape), c=np.full(spec.c.shape, 0.4),
                        s=c[None, :])
    model = build_lq_model(spec, np.zeros(n))
    ps = build_path_space(fair_coin(N))
    u = AdaptedProcess.zeros(ps, range(N), (1,))
    for solve in (solve_adjoint_recursive, solve_adjoint_explicit):
        adj = solve(ps, model, 0, u)
        for k in range(N):
            np.testing.assert_allclose(adj.P[k], np.broadcast_to(c, adj.P[k].shape), atol=1e-15)
            np.testing.assert_allclose(adj.Q[k], 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_explicit_matches_recursive(seed):
    ps, model = random_instance(seed)
    u = random_control(ps, model, np.random.default_rng(seed))
    a = solve_adjoint_recursive(ps, model, 0, u)
    b = solve_adjoint_explicit(ps, model, 0, u)
    assert a.P.max_abs_diff(b.P) <= 1e-12
    assert a.Q.max_abs_diff(b.Q) <= 1e-12
    assert a.is_finite()


def test_single_stage_terminal_condition():
    ps, model = random_instance(11, N=1)
    u = random_control(ps, model, np.random.default_rng(0))
    lin = linearize(ps, model, 0, u)
    adj = solve_adjoint_explicit(ps, model, 0, u)
    np.testing.assert_allclose(adj.P[0][0], ps.expect(lin.phi_x, 1), atol=1e-15)
    np.testing.assert_allclose(adj.Q[0][0], ps.expect(lin.phi_x[:, :, None] * ps.noise(1)[:, None, :], 1),
                               atol=1e-15)


def test_hamiltonian_reduces_to_running_cost():
    ps, model = random_instance(2, N=2, n=2, m=2, d=1)
    x, u = np.array([0.3, -0.2]), np.array([1.0, 0.5])
    h = hamiltonian_eval(model, 0, 1, x, u, np.zeros(2), np.zeros((2, 1)))
    assert h == pytest.approx(eval_costs(model, 0, 1, x, u), abs=1e-15)


def test_hamiltonian_inner_product():
    spec = LqFamilySpec.zeros(1, 1, 2, 2, 1)
    spec = spec.replace(B=np.broadcast_to(np.eye(2), spec.B.shape))
    model = build_lq_model(spec, np.zeros(2))
    p, u = np.array([0.5, -2.0]), np.array([3.0, 1.0])
    assert hamiltonian_eval(model, 0, 0, [0.0, 0.0], u, p, np.zeros((2, 1))) == p @ u


def test_investment_hamiltonian_hand_value():
    model = build_investment_model(investment())
    h = hamiltonian_eval(model, 0, 0, [1.0], [2.0], [-1.0], [[0.0]])
    assert h == pytest.approx(0.7, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_hamiltonian_gradient_matches_central_differences(seed):
    ps, model = random_instance(seed, N=2, n=2, m=3, d=2)
    rng = np.random.default_rng(seed)
    x, u = rng.normal(size=2), rng.normal(size=3)
    P, Q = rng.normal(size=2), rng.normal(size=(2, 2))
    grad = hamiltonian_u_gradient(model, 0, 1, x, u, P, Q)
    h = 1e-5
    fd = [(hamiltonian_eval(model, 0, 1, x, u + h * e, P, Q) - hamiltonian_eval(model, 0, 1, x, u - h * e, P, Q))
          / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(grad, fd, atol=1e-8)


def test_hamiltonian_shape_errors():
    ps, model = random_instance(0, N=1, n=2, m=1, d=1)
    with pytest.raises(ShapeMismatch):
        hamiltonian_eval(model, 0, 0, [0.0], [0.0], [0.0, 0.0], [[0.0], [0.0]])
    with pytest.raises(ShapeMismatch):
        hamiltonian_u_gradient(model, 0, 0, [0.0, 0.0], [0.0], [0.0, 0.0], [0.0, 0.0])


def test_tree_gradients_match_point_evaluator():
    ps, model = random_instance(4, N=2, n=2, m=2, d=2)
    u = random_control(ps, model, np.random.default_rng(4))
    lin = linearize(ps, model, 0, u)
    adj = solve_adjoint_recursive(ps, model, 0, u, lin)
    grads = hamiltonian_gradients(lin, adj)
    k, j = 1, 3
    point = hamiltonian_u_gradient(model, 0, k, lin.x_star[k][j], u[k][j], adj.P[k][j], adj.Q[k][j], node=j)
    np.testing.assert_allclose(grads[k][j], point, atol=1e-14)


def test_closed_form_investment_adjoint():
    spec = investment(N=3, H=1.0)
    ps = build_path_space(fair_coin(3))
    adj = closed_form_adjoint(spec, ps, 0)
    for k, expected in enumerate([-1.21, -1.1, -1.0]):
        np.testing.assert_allclose(adj.P[k], expected, atol=1e-14)
        np.testing.assert_array_equal(adj.Q[k], 0.0)
    assert closed_form_adjoint(investment(N=1, H=2.0), build_path_space(fair_coin(1)), 1).P[0][0, 0] == -2.0
    model = build_investment_model(spec)
    u = AdaptedProcess.constant(ps, range(3), np.array([0.3]))
    generic = solve_adjoint_recursive(ps, model, 0, u)
    assert generic.P.max_abs_diff(adj.P) <= 1e-14
    assert generic.Q.max_abs_diff(adj.Q) <= 1e-14


def test_duality_at_u_star_is_zero():
    ps, model = random_instance(5, N=3)
    u = random_control(ps, model, np.random.default_rng(5))
    assert duality_sides(ps, model, 0, u, u) == (0.0, 0.0)
    assert duality_residual(ps, model, 0, u, u) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_duality_identity(seed):
    ps, model = random_instance(seed, N=3, d=1)
    rng = np.random.default_rng(seed)
    u_star, u = random_control(ps, model, rng), random_control(ps, model, rng)
    lhs, rhs = duality_sides(ps, model, 0, u_star, u)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    assert np.max(stagewise_duality_gaps(ps, model, 0, u_star, u)) <= 1e-10


def test_duality_investment_reduces_to_excess_return_term():
    spec = investment(N=2, mu=0.25)
    ps = build_path_space(fair_coin(2))
    model = build_investment_model(spec)
    rng = np.random.default_rng(9)
    u_star, u = random_control(ps, model, rng), random_control(ps, model, rng)
    lhs, rhs = duality_sides(ps, model, 0, u_star, u)
    adj = closed_form_adjoint(spec, ps, 0)
    u_hat = u - u_star
    reduced = sum(ps.expect(adj.P[k][:, 0] * spec.excess_return(0, k)[0] * u_hat[k][:, 0], k)
                  for k in range(2))
    assert lhs == pytest.approx(reduced, abs=1e-14)
    assert rhs == pytest.approx(reduced, abs=1e-14)
