"""Backward adjoint pair, Hamiltonian, and the duality identity.

``P(k)`` (shape ``n``) and ``Q(k)`` (shape ``n x d``, column ``i`` pairing
with diffusion column ``i``) live on stage-``k`` nodes for ``k = 0..N-1``.
They are conditional expectations of the stage-``k+1`` driver

    G(k+1) = d_x b(k+1)' P(k+1) + sum_i d_x sigma^i(k+1)' Q^i(k+1) + d_x f(k+1)'

(with ``G(N) = d_x phi(x(N))'``), taken plain for ``P`` and multiplied by
``B(k+1)'`` for ``Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Linearization, _variational_recursive, linearize
from .errors import ShapeMismatch
from .model import ScenarioModel
from .path_space import AdaptedProcess, PathSpace


@dataclass
class AdjointPair:
    gamma: int
    P: AdaptedProcess
    Q: AdaptedProcess
    u_star: AdaptedProcess

    def is_finite(self):
        return self.P.is_finite() and self.Q.is_finite()


def _driver(ps, lin, P_next, Q_next, k):
    """``G(k)`` at stage-``k`` nodes for ``1 <= k <= N-1``."""
    der = lin.derivs[k]
    return (np.einsum("pnm,pn->pm", der.bx, P_next)
            + np.einsum("pinm,pni->pm", der.sx, Q_next)
            + der.fx)


def _condition_pair(ps, G, k):
    """``(E[G | F_k], E[G B(k+1)' | F_k])`` for ``G`` on stage ``k+1`` nodes."""
    P = ps.condexp(G, k + 1, k)
    Q = ps.condexp(G[:, :, None] * ps.noise(k + 1)[:, None, :], k + 1, k)
    return P, Q


def solve_adjoint_recursive(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                            lin: Linearization | None = None) -> AdjointPair:
    """Backward recursion, one exact conditional expectation per stage."""
    lin = lin or linearize(ps, model, gamma, u_star)
    N = model.horizon
    Ps, Qs = [None] * N, [None] * N
    Ps[N - 1], Qs[N - 1] = _condition_pair(ps, lin.phi_x, N - 1)
    for k in range(N - 2, -1, -1):
        Ps[k], Qs[k] = _condition_pair(ps, _driver(ps, lin, Ps[k + 1], Qs[k + 1], k + 1), k)
    return AdjointPair(gamma, AdaptedProcess(0, Ps), AdaptedProcess(0, Qs), u_star)


def solve_adjoint_explicit(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                           lin: Linearization | None = None) -> AdjointPair:
    """Pathwise closed form followed by a single conditional expectation.

    On every leaf, ``S_k = sum_{n=k+1}^{N} M(k+1)'...M(n-1)' d_x f(n)'`` with
    ``d_x f(N) := d_x phi``; the matrix prefix is extended one factor per
    term.  Then ``P(k) = E[S_k | F_k]`` and ``Q(k) = E[S_k B(k+1)' | F_k]``.
    """
    lin = lin or linearize(ps, model, gamma, u_star)
    N, n = model.horizon, model.state_dim
    leaves = ps.n_nodes(N)
    # M(j) on stage j+1 nodes, lifted to the leaves
    Ms = []
    for j, der in enumerate(lin.derivs):
        par = ps.parents(j + 1)
        M = der.bx[par] + np.einsum("pinm,pi->pnm", der.sx[par], ps.noise(j + 1))
        Ms.append(ps.lift(M, j + 1, N))
    grads = [ps.lift(lin.derivs[s].fx, s, N) if s < N else lin.phi_x for s in range(N + 1)]
    Ps, Qs = [], []
    for k in range(N):
        prefix = np.broadcast_to(np.eye(n), (leaves, n, n))
        S = grads[k + 1].copy()
        for s in range(k + 2, N + 1):
            prefix = prefix @ np.swapaxes(Ms[s - 1], -1, -2)
            S = S + np.einsum("pnm,pm->pn", prefix, grads[s])
        B = ps.lift(ps.noise(k + 1), k + 1, N)
        Ps.append(ps.condexp(S, N, k))
        Qs.append(ps.condexp(S[:, :, None] * B[:, None, :], N, k))
    return AdjointPair(gamma, AdaptedProcess(0, Ps), AdaptedProcess(0, Qs), u_star)


def _hamiltonian_args(model, x, u, P_val, Q_val):
    n, m, d = model.state_dim, model.control_dim, model.noise_dim
    x, u = np.asarray(x, float), np.asarray(u, float)
    P_val, Q_val = np.asarray(P_val, float), np.asarray(Q_val, float)
    if x.shape != (n,) or u.shape != (m,) or P_val.shape != (n,) or Q_val.shape != (n, d):
        raise ShapeMismatch(
            f"expected x ({n},), u ({m},), P ({n},), Q ({n}, {d}); got "
            f"{x.shape}, {u.shape}, {P_val.shape}, {Q_val.shape}")
    return x, u, P_val, Q_val


def hamiltonian_eval(model: ScenarioModel, gamma: int, k: int, x, u, P_val, Q_val, node: int = 0) -> float:
    """``f + <P, b> + sum_i <Q^i, sigma^i>`` at a single point."""
    x, u, P_val, Q_val = _hamiltonian_args(model, x, u, P_val, Q_val)
    co = model.coeffs(gamma)
    nodes = np.asarray(node)
    b = co.drift(k, x, u, nodes)
    sigma = co.diffusion(k, x, u, nodes)
    return float(co.running_cost(k, x, u, nodes) + P_val @ b + np.sum(Q_val * sigma))


def hamiltonian_u_gradient(model: ScenarioModel, gamma: int, k: int, x, u, P_val, Q_val,
                           node: int = 0) -> np.ndarray:
    """``d_u f' + d_u b' P + sum_i d_u sigma^i' Q^i`` at a single point."""
    x, u, P_val, Q_val = _hamiltonian_args(model, x, u, P_val, Q_val)
    der = model.coeffs(gamma).derivatives(k, x, u, np.asarray(node))
    return (np.asarray(der.fu, float) + np.asarray(der.bu, float).T @ P_val
            + np.einsum("inm,ni->m", np.asarray(der.su, float), Q_val))


def hamiltonian_gradients(lin: Linearization, adj: AdjointPair) -> list:
    """``d_u H`` along ``(x*, u*, P, Q)`` for every stage, each of shape ``(n_k, m)``."""
    out = []
    for k, der in enumerate(lin.derivs):
        out.append(der.fu + np.einsum("pnm,pn->pm", der.bu, adj.P[k])
                   + np.einsum("pinm,pni->pm", der.su, adj.Q[k]))
    return out


def duality_sides(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                  u: AdaptedProcess, lin: Linearization | None = None, adj: AdjointPair | None = None):
    """Both sides of the duality identity for direction ``u - u*``.

    Left: ``E[sum_k d_x f* x_bar(k) + d_x phi* x_bar(N)]``.
    Right: ``E[sum_k (P' d_u b* + sum_i Q^i' d_u sigma*^i) (u(k) - u*(k))]``.
    """
    lin = lin or linearize(ps, model, gamma, u_star)
    adj = adj or solve_adjoint_recursive(ps, model, gamma, u_star, lin)
    N = model.horizon
    u_hat = u - u_star
    xbar = _variational_recursive(ps, lin, u_hat, model.state_dim)
    lhs = sum(ps.expect(np.einsum("pn,pn->p", der.fx, xbar[k]), k) for k, der in enumerate(lin.derivs))
    lhs += ps.expect(np.einsum("pn,pn->p", lin.phi_x, xbar[N]), N)
    rhs = 0.0
    for k, der in enumerate(lin.derivs):
        w = np.einsum("pnm,pn->pm", der.bu, adj.P[k]) + np.einsum("pinm,pni->pm", der.su, adj.Q[k])
        rhs += ps.expect(np.einsum("pm,pm->p", w, u_hat[k]), k)
    return float(lhs), float(rhs)


def duality_residual(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                     u: AdaptedProcess) -> float:
    """Absolute gap between the two sides of the duality identity."""
    lhs, rhs = duality_sides(ps, model, gamma, u_star, u)
    return abs(lhs - rhs)


def stagewise_duality_gaps(ps: PathSpace, model: ScenarioModel, gamma: int, u_star: AdaptedProcess,
                           u: AdaptedProcess) -> np.ndarray:
    """Per-stage one-step identities behind the duality relation.

    For each ``k`` compares ``E[G(k+1) x_bar(k+1) | F_k]`` with
    ``(P'd_x b + sum Q'd_x sigma) x_bar(k) + (P'd_u b + sum Q'd_u sigma) u_hat(k)``
    node by node and returns the largest absolute gap per stage.
    """
    lin = linearize(ps, model, gamma, u_star)
    adj = solve_adjoint_recursive(ps, model, gamma, u_star, lin)
    N = model.horizon
    u_hat = u - u_star
    xbar = _variational_recursive(ps, lin, u_hat, model.state_dim)
    gaps = np.zeros(N)
    for k in range(N):
        G = lin.phi_x if k == N - 1 else _driver(ps, lin, adj.P[k + 1], adj.Q[k + 1], k + 1)
        left = ps.condexp(np.einsum("pn,pn->p", G, xbar[k + 1]), k + 1, k)
        der = lin.derivs[k]
        wx = np.einsum("pnm,pn->pm", der.bx, adj.P[k]) + np.einsum("pinm,pni->pm", der.sx, adj.Q[k])
        wu = np.einsum("pnm,pn->pm", der.bu, adj.P[k]) + np.einsum("pinm,pni->pm", der.su, adj.Q[k])
        right = np.einsum("pm,pm->p", wx, xbar[k]) + np.einsum("pm,pm->p", wu, u_hat[k])
        gaps[k] = np.max(np.abs(left - right))
    return gaps
