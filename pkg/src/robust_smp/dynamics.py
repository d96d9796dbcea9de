"""Forward state recursion, scenario costs and the variational equation.

All computations run stage by stage over the whole node set of a
:class:`~robust_smp.path_space.PathSpace`.  A child node's state is obtained
from its parent's state, its parent's control and the child's own noise
value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InadmissibleControl, InadmissiblePerturbation, ShapeMismatch
from .model import Derivatives, ScenarioModel
from .path_space import AdaptedProcess, PathSpace

ADMISSIBILITY_TOL = 1e-14
DEFAULT_DELTAS = (1e-1, 5e-2, 2.5e-2, 1.25e-2)


@dataclass
class Trajectory:
    gamma: int
    state: AdaptedProcess
    control: AdaptedProcess


@dataclass
class Linearization:
    """Everything evaluated along ``(x*_gamma, u*)``.

    ``derivs[k]`` holds stage-``k`` node arrays (leading axis = nodes) for
    ``k < N``; ``phi_x`` is the terminal gradient at the leaves.
    """

    gamma: int
    trajectory: Trajectory
    derivs: list
    phi_x: np.ndarray

    @property
    def u_star(self):
        return self.trajectory.control

    @property
    def x_star(self):
        return self.trajectory.state


def check_control(ps: PathSpace, model: ScenarioModel, u: AdaptedProcess, tol=ADMISSIBILITY_TOL):
    """Raise unless ``u`` is a stage ``0..N-1`` control with values in every ``U_k``."""
    u.validate(ps, range(0, model.horizon), (model.control_dim,))
    for k, box in enumerate(model.control_sets):
        if box is None:
            continue
        scale = 1.0 + max(np.max(np.abs(box.lo), initial=0.0), np.max(np.abs(box.hi), initial=0.0))
        if box.slack(u[k]) > tol * scale:
            raise InadmissibleControl(f"control leaves U_{k} by {box.slack(u[k]):.3g}")


def simulate_batch(ps: PathSpace, model: ScenarioModel, gamma: int, controls):
    """States for a batch of controls.

    ``controls[k]`` has shape ``(*batch, n_k, m)``; the result is a list of
    ``(*batch, n_k, n)`` arrays for ``k = 0..N``.  No admissibility check.
    """
    co = model.coeffs(gamma)
    batch = controls[0].shape[:-2]
    xs = [np.broadcast_to(model.x0, batch + (1, model.state_dim)).astype(float)]
    for k in range(model.horizon):
        nodes = np.arange(ps.n_nodes(k))
        x, u = xs[k], controls[k]
        drift = co.drift(k, x, u, nodes)
        diff = co.diffusion(k, x, u, nodes)
        par = ps.parents(k + 1)
        xs.append(drift[..., par, :] + np.einsum("...ij,...j->...i", diff[..., par, :, :], ps.noise(k + 1)))
    return xs


def costs_batch(ps: PathSpace, model: ScenarioModel, gamma: int, controls, states=None):
    """Exact expected total cost for a batch of controls, shape ``batch``."""
    co = model.coeffs(gamma)
    if states is None:
        states = simulate_batch(ps, model, gamma, controls)
    total = 0.0
    for k in range(model.horizon):
        f = co.running_cost(k, states[k], controls[k], np.arange(ps.n_nodes(k)))
        total = total + f @ ps.node_probabilities(k)
    phi = co.terminal_cost(states[-1], np.arange(ps.n_nodes(model.horizon)))
    return total + phi @ ps.node_probabilities(model.horizon)


def simulate_state(ps: PathSpace, model: ScenarioModel, gamma: int, u: AdaptedProcess) -> Trajectory:
    """Solve the state recursion for scenario ``gamma`` on every node of the tree."""
    if ps.horizon != model.horizon or ps.dim != model.noise_dim:
        raise ShapeMismatch("path space and model disagree on horizon or noise dimension")
    check_control(ps, model, u)
    xs = simulate_batch(ps, model, gamma, u.values)
    for k, x in enumerate(xs):
        if x.shape != (ps.n_nodes(k), model.state_dim):
            raise ShapeMismatch(f"drift/diffusion produced state of shape {x.shape} at stage {k}")
    return Trajectory(gamma, AdaptedProcess(0, xs), u)


def scenario_cost(ps: PathSpace, model: ScenarioModel, gamma: int, u: AdaptedProcess) -> float:
    """``E[sum_k f(k, x(k), u(k)) + phi(x(N))]`` for scenario ``gamma``."""
    traj = simulate_state(ps, model, gamma, u)
    return float(costs_batch(ps, model, gamma, u.values, traj.state.values))


def linearize(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess) -> Linearization:
    traj = simulate_state(ps, model, gamma, u_star)
    co = model.coeffs(gamma)
    derivs = []
    for k in range(model.horizon):
        der = co.derivatives(k, traj.state[k], u_star[k], np.arange(ps.n_nodes(k)))
        derivs.append(Derivatives(*(np.asarray(v, dtype=float) if v is not None else None for v in der)))
    N = model.horizon
    phi_x = np.asarray(co.terminal_gradient(traj.state[N], np.arange(ps.n_nodes(N))), dtype=float)
    return Linearization(gamma, traj, derivs, phi_x)


def _direction(ps, model, u_hat):
    u_hat.validate(ps, range(0, model.horizon), (model.control_dim,))
    return u_hat


def transition_factors(ps: PathSpace, lin: Linearization, u_hat: AdaptedProcess):
    """``M(k)`` and ``T(k)`` of the variational recursion, at stage ``k+1`` nodes.

    ``M(k) = d_x b + sum_i d_x sigma^i B^i(k+1)`` and
    ``T(k) = (d_u b + sum_i d_u sigma^i B^i(k+1)) u_hat(k)``.
    """
    Ms, Ts = [], []
    for k, der in enumerate(lin.derivs):
        par = ps.parents(k + 1)
        B = ps.noise(k + 1)
        M = der.bx[par] + np.einsum("pinm,pi->pnm", der.sx[par], B)
        G = der.bu[par] + np.einsum("pinm,pi->pnm", der.su[par], B)
        Ms.append(M)
        Ts.append(np.einsum("pnm,pm->pn", G, u_hat[k][par]))
    return Ms, Ts


def _variational_recursive(ps, lin, u_hat, n):
    xbar = [np.zeros((1, n))]
    for k, der in enumerate(lin.derivs):
        par = ps.parents(k + 1)
        B = ps.noise(k + 1)
        xp, up = xbar[k][par], u_hat[k][par]
        step = (np.einsum("pnm,pm->pn", der.bx[par], xp) + np.einsum("pnm,pm->pn", der.bu[par], up)
                + np.einsum("pinm,pm,pi->pn", der.sx[par], xp, B)
                + np.einsum("pinm,pm,pi->pn", der.su[par], up, B))
        xbar.append(step)
    return AdaptedProcess(0, xbar)


def solve_variational_recursive(ps: PathSpace, model: ScenarioModel, gamma: int,
                                u_star: AdaptedProcess, u_hat: AdaptedProcess,
                                lin: Linearization | None = None) -> AdaptedProcess:
    """Forward recursion for the state derivative ``x_bar`` in direction ``u_hat``."""
    lin = lin or linearize(ps, model, gamma, u_star)
    return _variational_recursive(ps, lin, _direction(ps, model, u_hat), model.state_dim)


def solve_variational_explicit(ps: PathSpace, model: ScenarioModel, gamma: int,
                               u_star: AdaptedProcess, u_hat: AdaptedProcess,
                               lin: Linearization | None = None) -> AdaptedProcess:
    """Closed form ``x_bar(k) = T(k-1) + sum_{i<k-1} M(k-1)...M(i+1) T(i)``.

    Products are formed explicitly per stage-``k`` node; the empty sum at
    ``k = 1`` contributes nothing.
    """
    lin = lin or linearize(ps, model, gamma, u_star)
    u_hat = _direction(ps, model, u_hat)
    n = model.state_dim
    Ms, Ts = transition_factors(ps, lin, u_hat)
    xbar = [np.zeros((1, n))]
    for k in range(1, model.horizon + 1):
        total = ps.lift(Ts[k - 1], k, k)
        for i in range(0, k - 1):
            prod = np.broadcast_to(np.eye(n), (ps.n_nodes(k), n, n))
            for j in range(i + 1, k):
                prod = ps.lift(Ms[j], j + 1, k) @ prod
            total = total + np.einsum("pnm,pm->pn", prod, ps.lift(Ts[i], i + 1, k))
        xbar.append(total)
    return AdaptedProcess(0, xbar)


def directional_cost_derivative(ps: PathSpace, model: ScenarioModel, gamma: int,
                                u_star: AdaptedProcess, u: AdaptedProcess,
                                lin: Linearization | None = None) -> float:
    """``y_bar^u_gamma(0)``: first-order change of the scenario cost along ``u - u*``."""
    lin = lin or linearize(ps, model, gamma, u_star)
    u_hat = u - u_star
    xbar = _variational_recursive(ps, lin, u_hat, model.state_dim)
    total = 0.0
    for k, der in enumerate(lin.derivs):
        integrand = np.einsum("pn,pn->p", der.fx, xbar[k]) + np.einsum("pm,pm->p", der.fu, u_hat[k])
        total += ps.expect(integrand, k)
    N = model.horizon
    total += ps.expect(np.einsum("pn,pn->p", lin.phi_x, xbar[N]), N)
    return float(total)


def perturb(model: ScenarioModel, u_star: AdaptedProcess, u: AdaptedProcess, delta: float,
            tol=ADMISSIBILITY_TOL) -> AdaptedProcess:
    """``u* + delta (u - u*)``, snapped back into ``U_k`` when roundoff leaves it by at most ``tol``."""
    out = u_star + (u - u_star) * delta
    vals = []
    for k, box in enumerate(model.control_sets):
        v = out[k]
        if box is not None:
            slack = box.slack(v)
            if slack > tol * (1.0 + np.max(np.abs(v), initial=0.0)):
                raise InadmissiblePerturbation(f"perturbed control leaves U_{k} by {slack:.3g}")
            v = box.project(v)
        vals.append(v)
    return AdaptedProcess(0, vals)


@dataclass(frozen=True)
class FDRow:
    delta: float
    quotient: float
    derivative: float
    error: float


def fd_convergence_report(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                          u: AdaptedProcess, deltas=DEFAULT_DELTAS) -> list:
    """Compare ``(J(u* + delta (u - u*)) - J(u*)) / delta`` with ``y_bar`` for each ``delta``."""
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas):
        raise ValueError("deltas must be positive")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly decreasing")
    ybar = directional_cost_derivative(ps, model, gamma, u_star, u)
    base = scenario_cost(ps, model, gamma, u_star)
    rows = []
    for delta in deltas:
        quotient = (scenario_cost(ps, model, gamma, perturb(model, u_star, u, delta)) - base) / delta
        rows.append(FDRow(delta, quotient, ybar, abs(quotient - ybar)))
    return rows


def second_moments(ps: PathSpace, traj: Trajectory) -> np.ndarray:
    """``E|x(k)|^2`` for ``k = 0..N``."""
    return np.array([ps.expect(np.sum(traj.state[k] ** 2, axis=-1), k) for k in traj.state.stages])
