"""Two-scenario robust portfolio selection with a scalar wealth state.

Wealth follows ``x(k+1) = (1+e(k)) x + A(k)'u + sum_j beta^j(k)'u B^j(k+1)``
with excess returns ``A = mu - e 1``.  Each scenario pays the tracking cost
``(u - psi)'G(u - psi)/2`` per stage and ``-H x(N)`` at the end.  Scenario 1 is
the bull market, scenario 2 the bear market, and the worst-case weight on
the bull market is ``theta``.

Per-stage market data may be deterministic (shape ``(m,)`` or ``(m, m)``)
or node-adapted (a leading node axis matching the tree stage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import AdjointPair
from .errors import BadSpec, BisectionStalled, ShapeMismatch, SingularWeight
from .model import Coefficients, Derivatives, ScenarioModel, min_eigenvalue
from .path_space import AdaptedProcess, PathSpace
from .robust import scenario_costs

STANDARDIZED_TOL = 1e-12
THETA_TOL = 1e-8
VALUE_TOL = 1e-6
MAX_BISECTIONS = 200


def _per_stage(values, N, base_ndim, name):
    """List of ``N`` stage arrays; a plain array with a leading stage axis is split."""
    if isinstance(values, np.ndarray) or not isinstance(values, (list, tuple)):
        arr = np.asarray(values, dtype=float)
        if arr.ndim == base_ndim:
            return [arr] * N
        if arr.ndim != base_ndim + 1 or arr.shape[0] != N:
            raise BadSpec(f"{name} must have a leading stage axis of length {N}")
        return [arr[k] for k in range(N)]
    if len(values) != N:
        raise BadSpec(f"{name} needs {N} stage entries, got {len(values)}")
    return [np.asarray(v, dtype=float) for v in values]


def _lookup(v, base_ndim, nodes):
    if v.ndim == base_ndim:
        return v
    if nodes is None:
        raise ShapeMismatch("node-adapted market data needs node indices")
    return v[nodes]


@dataclass(frozen=True, eq=False)
class InvestmentSpec:
    """Market and preference data; scenario-indexed fields are pairs ``(bull, bear)``.

    ``beta[g][k]`` has shape ``(d, m)``: row ``j`` is the exposure of the
    portfolio to noise component ``j``.
    """

    horizon: int
    stocks: int
    noise_dim: int
    rate: np.ndarray
    mu: tuple
    beta: tuple
    G: tuple
    H: tuple
    psi: object
    x0: float

    def __post_init__(self):
        N, m, d = self.horizon, self.stocks, self.noise_dim
        if int(N) != N or N < 1 or int(m) != m or m < 1 or int(d) != d or d < 1:
            raise BadSpec("horizon, stocks and noise_dim must be positive integers")
        rate = np.array(self.rate, dtype=float).ravel()
        if rate.shape == (1,):
            rate = np.full(N, rate[0])
        if rate.shape != (N,):
            raise BadSpec(f"rate needs {N} entries, got {rate.size}")
        if not np.all(np.isfinite(rate)) or np.any(rate <= 0):
            raise BadSpec("interest rates must be positive and finite")
        if len(self.mu) != 2 or len(self.beta) != 2 or len(self.G) != 2 or len(self.H) != 2:
            raise BadSpec("mu, beta, G and H need one entry per scenario (bull, bear)")
        mu = tuple(_per_stage(v, N, 1, f"mu{g + 1}") for g, v in enumerate(self.mu))
        beta = tuple(_per_stage(v, N, 2, f"beta{g + 1}") for g, v in enumerate(self.beta))
        G = tuple(_per_stage(v, N, 2, f"G{g + 1}") for g, v in enumerate(self.G))
        psi = _per_stage(self.psi, N, 1, "psi")
        H = tuple(float(h) for h in self.H)
        for g in range(2):
            for k in range(N):
                if mu[g][k].shape[-1:] != (m,):
                    raise BadSpec(f"mu{g + 1}[{k}] must end in a length-{m} axis")
                if beta[g][k].shape[-2:] != (d, m):
                    raise BadSpec(f"beta{g + 1}[{k}] must end in shape ({d}, {m})")
                Gk = G[g][k]
                if Gk.shape[-2:] != (m, m):
                    raise BadSpec(f"G{g + 1}[{k}] must end in shape ({m}, {m})")
                if np.max(np.abs(Gk - np.swapaxes(Gk, -1, -2)), initial=0.0) > 1e-12:
                    raise BadSpec(f"G{g + 1}[{k}] is not symmetric")
                if min_eigenvalue(Gk) <= 0:
                    raise BadSpec(f"G{g + 1}[{k}] is not positive definite")
                for arr in (mu[g][k], beta[g][k], Gk):
                    if not np.all(np.isfinite(arr)):
                        raise BadSpec(f"scenario {g + 1} stage {k}: non-finite market data")
            if not (np.isfinite(H[g]) and H[g] > 0):
                raise BadSpec(f"H{g + 1} must be positive")
        for k in range(N):
            if psi[k].shape[-1:] != (m,) or not np.all(np.isfinite(psi[k])):
                raise BadSpec(f"psi[{k}] must be a finite length-{m} vector")
        x0 = float(self.x0)
        if not x0 > 0:
            raise BadSpec("initial wealth must be positive")
        rate.setflags(write=False)
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "x0", x0)

    def excess_return(self, gamma, k, nodes=None):
        """``A_gamma(k) = mu_gamma(k) - e(k) 1``."""
        return _lookup(self.mu[gamma][k], 1, nodes) - self.rate[k]

    def growth(self, k):
        """``prod_{i=k+1}^{N-1} (1 + e(i))``; empty products are 1."""
        return float(np.prod(1.0 + self.rate[k + 1:]))


class InvestmentCoefficients(Coefficients):
    """Wealth dynamics and tracking costs for one market scenario."""

    def __init__(self, spec: InvestmentSpec, gamma: int):
        self.spec, self.gamma = spec, gamma

    def drift(self, k, x, u, nodes=None):
        A = self.spec.excess_return(self.gamma, k, nodes)
        return (1.0 + self.spec.rate[k]) * x + np.sum(A * u, axis=-1, keepdims=True)

    def diffusion(self, k, x, u, nodes=None):
        beta = _lookup(self.spec.beta[self.gamma][k], 2, nodes)
        return np.einsum("...jm,...m->...j", beta, u)[..., None, :] + 0.0 * x[..., None]

    def running_cost(self, k, x, u, nodes=None):
        G = _lookup(self.spec.G[self.gamma][k], 2, nodes)
        dev = u - _lookup(self.spec.psi[k], 1, nodes)
        return 0.5 * np.einsum("...i,...ij,...j->...", dev, G, dev)

    def terminal_cost(self, x, nodes=None):
        return -self.spec.H[self.gamma] * x[..., 0]

    def derivatives(self, k, x, u, nodes=None):
        spec, m, d = self.spec, self.spec.stocks, self.spec.noise_dim
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        A = np.broadcast_to(spec.excess_return(self.gamma, k, nodes), lead + (m,))
        beta = np.broadcast_to(_lookup(spec.beta[self.gamma][k], 2, nodes), lead + (d, m))
        G = _lookup(spec.G[self.gamma][k], 2, nodes)
        dev = u - _lookup(spec.psi[k], 1, nodes)
        return Derivatives(
            bx=np.full(lead + (1, 1), 1.0 + spec.rate[k]),
            bu=A[..., None, :],
            sx=np.zeros(lead + (d, 1, 1)),
            su=beta[..., :, None, :],
            fx=np.zeros(lead + (1,)),
            fu=np.broadcast_to(np.einsum("...ij,...j->...i", G, dev), lead + (m,)),
        )

    def terminal_gradient(self, x, nodes=None):
        return np.full(x.shape, -self.spec.H[self.gamma])

    def convexity(self, tol=1e-12):
        for k, Gk in enumerate(self.spec.G[self.gamma]):
            low = min_eigenvalue(Gk)
            if low < -tol:
                return False, f"G[{k}] has eigenvalue {low:.3g}"
        return True, "affine wealth dynamics, positive definite tracking weights, linear terminal cost"


def build_investment_model(spec: InvestmentSpec) -> ScenarioModel:
    """Scalar-state model with scenarios labelled 1 (bull) and 2 (bear), controls unconstrained."""
    return ScenarioModel((1, 2), 1, spec.stocks, spec.noise_dim, spec.horizon, [spec.x0],
                         (InvestmentCoefficients(spec, 0), InvestmentCoefficients(spec, 1)))


def _check_tree(ps, spec):
    if ps.horizon != spec.horizon or ps.dim != spec.noise_dim:
        raise ShapeMismatch("path space and investment spec disagree on horizon or noise dimension")
    for k in range(spec.horizon):
        data = [(spec.psi[k], 1)] + [(spec.mu[g][k], 1) for g in range(2)]
        data += [(spec.beta[g][k], 2) for g in range(2)] + [(spec.G[g][k], 2) for g in range(2)]
        for v, base in data:
            if v.ndim > base and v.shape[0] != ps.n_nodes(k):
                raise ShapeMismatch(f"stage {k}: adapted data has {v.shape[0]} nodes, tree has {ps.n_nodes(k)}")


def require_standardized(ps: PathSpace, tol=STANDARDIZED_TOL):
    """Raise unless ``E[B(k+1) | F_k] = 0`` and ``E[B(k+1) B(k+1)' | F_k] = I`` at every node."""
    for k in range(ps.horizon):
        B = ps.noise(k + 1)
        mean = ps.condexp(B, k + 1, k)
        second = ps.condexp(B[:, :, None] * B[:, None, :], k + 1, k)
        if np.max(np.abs(mean)) > tol or np.max(np.abs(second - np.eye(ps.dim))) > tol:
            raise BadSpec(f"noise step {k + 1} is not standardized")


def closed_form_adjoint(spec: InvestmentSpec, ps: PathSpace, gamma: int) -> AdjointPair:
    """``P(k) = -H_gamma prod_{i=k+1}^{N-1} (1+e(i))`` and ``Q = 0`` on every node."""
    _check_tree(ps, spec)
    H = spec.H[gamma]
    P = [np.full((ps.n_nodes(k), 1), -H * spec.growth(k)) for k in range(spec.horizon)]
    Q = [np.zeros((ps.n_nodes(k), 1, spec.noise_dim)) for k in range(spec.horizon)]
    return AdjointPair(gamma, AdaptedProcess(0, P), AdaptedProcess(0, Q), None)


def _weighted(spec, theta, k, nodes):
    """``(G^theta(k), theta A_1 H_1 + (1-theta) A_2 H_2)`` per node."""
    w = (theta, 1.0 - theta)
    G = sum(w[g] * _lookup(spec.G[g][k], 2, nodes) for g in range(2))
    v = sum(w[g] * spec.H[g] * spec.excess_return(g, k, nodes) for g in range(2))
    return G, v


def optimal_portfolio(spec: InvestmentSpec, theta: float, ps: PathSpace) -> AdaptedProcess:
    """``u*(k) = psi(k) + G^theta(k)^{-1} (theta A_1 H_1 + (1-theta) A_2 H_2) prod_{i>k} (1+e(i))``."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    _check_tree(ps, spec)
    out = []
    for k in range(spec.horizon):
        nodes = np.arange(ps.n_nodes(k))
        G, v = _weighted(spec, theta, k, nodes)
        G = np.broadcast_to(G, (len(nodes), spec.stocks, spec.stocks))
        v = np.broadcast_to(v, (len(nodes), spec.stocks))
        try:
            step = np.linalg.solve(G, v[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularWeight(f"weighted tracking matrix is singular at stage {k}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularWeight(f"weighted tracking matrix is singular at stage {k}")
        out.append(_lookup(spec.psi[k], 1, nodes) + step * spec.growth(k))
    return AdaptedProcess(0, [np.broadcast_to(v, (ps.n_nodes(k), spec.stocks)).copy()
                              for k, v in enumerate(out)])


def stationarity_gap(spec: InvestmentSpec, ps: PathSpace, theta: float, u: AdaptedProcess) -> float:
    """Largest entry of ``A Theta P + sum_j beta^j Theta Q^j + G^theta (u - psi)`` over all nodes,
    with ``P, Q`` the closed-form adjoints."""
    adj = [closed_form_adjoint(spec, ps, g) for g in range(2)]
    w = (theta, 1.0 - theta)
    worst = 0.0
    for k in range(spec.horizon):
        nodes = np.arange(ps.n_nodes(k))
        total = 0.0
        for g in range(2):
            A = spec.excess_return(g, k, nodes)
            beta = _lookup(spec.beta[g][k], 2, nodes)
            total = total + w[g] * (A * adj[g].P[k]
                                    + np.einsum("...jm,...j->...m", beta, adj[g].Q[k][:, 0, :]))
        G, _ = _weighted(spec, theta, k, nodes)
        dev = u[k] - _lookup(spec.psi[k], 1, nodes)
        total = total + np.einsum("...ij,...j->...i", np.broadcast_to(G, dev.shape + (spec.stocks,)), dev)
        worst = max(worst, float(np.max(np.abs(total))))
    return worst


def evaluate_value_pair(ps: PathSpace, spec: InvestmentSpec, theta: float, model=None):
    """``(y_1(0, theta), y_2(0, theta))`` under the portfolio ``u*(., theta)``."""
    model = model or build_investment_model(spec)
    y = scenario_costs(ps, model, optimal_portfolio(spec, theta, ps))
    return float(y[0]), float(y[1])


@dataclass
class ThetaSolution:
    theta_star: float
    case_label: str  # "Case1", "Case2" or "Case3"
    control: AdaptedProcess
    value_pair: tuple
    robust_value: float
    g_at_0: float
    g_at_1: float
    iterations: int

    @property
    def gap(self):
        return self.value_pair[0] - self.value_pair[1]

    def report(self):
        lines = [
            f"case: {self.case_label}",
            f"theta_star: {self.theta_star:.17g}",
            f"y1: {self.value_pair[0]:.17g}",
            f"y2: {self.value_pair[1]:.17g}",
            f"robust_value: {self.robust_value:.17g}",
            f"g(0): {self.g_at_0:.17g}",
            f"g(1): {self.g_at_1:.17g}",
            f"bisection_iterations: {self.iterations}",
        ]
        if self.case_label == "Case3":
            lines.append("root: the bisection root bracketed by [0, 1]; other roots, if any, were not searched")
        return "\n".join(lines) + "\n"


def solve_theta_star(ps: PathSpace, spec: InvestmentSpec, theta_tol: float = THETA_TOL,
                     value_tol: float = VALUE_TOL, max_iter: int = MAX_BISECTIONS) -> ThetaSolution:
    """Worst-case bull-market weight by case analysis on ``g(theta) = y_1 - y_2``.

    ``g(1) >= 0`` gives ``theta* = 1``; otherwise ``g(0) <= 0`` gives
    ``theta* = 0``; otherwise ``g`` changes sign on ``[0, 1]`` and is bisected
    until the bracket is at most ``theta_tol`` wide and ``|g| <= value_tol``
    at its midpoint.
    """
    if theta_tol <= 0 or value_tol <= 0:
        raise ValueError("tolerances must be positive")
    require_standardized(ps)
    model = build_investment_model(spec)

    def g(theta):
        y = evaluate_value_pair(ps, spec, theta, model)
        return y[0] - y[1], y

    g1, y1 = g(1.0)
    g0, y0 = g(0.0)
    iterations = 0
    if g1 >= 0:
        theta, case, y = 1.0, "Case1", y1
    elif g0 <= 0:
        theta, case, y = 0.0, "Case2", y0
    else:
        case = "Case3"
        lo, hi = 0.0, 1.0
        while True:
            theta = 0.5 * (lo + hi)
            gm, y = g(theta)
            iterations += 1
            if hi - lo <= theta_tol and abs(gm) <= value_tol:
                break
            if gm == 0.0:
                break
            if iterations >= max_iter or theta in (lo, hi):
                raise BisectionStalled(
                    f"|g| = {abs(gm):.3g} after {iterations} bisections on a bracket of width {hi - lo:.3g}")
            if gm > 0:
                lo = theta
            else:
                hi = theta
    control = optimal_portfolio(spec, theta, ps)
    return ThetaSolution(theta, case, control, y, max(y), g0, g1, iterations)
