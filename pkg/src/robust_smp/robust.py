"""Ambiguity over the scenario set and the robust first- and second-order checks.

The ambiguity set is the convex hull of finitely many probability vectors
over the scenario indices.  A linear functional of the measure attains its
maximum at a vertex, so the robust cost is a finite maximum and the set of
maximizing measures is the face spanned by the maximizing vertices.

Directional derivatives of the scenario costs are bilinear in the measure
and the direction: ``y_bar^u_gamma(0) = E[sum_k d_u H_gamma(k) (u(k) - u*(k))]``
by the duality identity, so every minimax quantity below is computed from
the per-scenario Hamiltonian gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog, nnls

from .adjoint import hamiltonian_gradients, solve_adjoint_recursive
from .dynamics import check_control, linearize, scenario_cost
from .errors import (BadSpec, EmptyActiveSet, EmptyAmbiguitySet, GridTooLarge, MeasureNotInSet,
                     ShapeMismatch, UnsupportedFamily)
from .model import ScenarioModel
from .path_space import AdaptedProcess, PathSpace

VERTEX_SUM_TOL = 1e-12
CLAMP_TOL = 1e-15
MEMBERSHIP_TOL = 1e-9
ACTIVE_TOL = 1e-9
BOUND_TOL = 1e-12
MAX_LAMBDA_GRID = 10**6


def _check_probability_vector(w, what):
    w = np.array(w, dtype=float).ravel()
    if w.size == 0:
        raise BadSpec(f"{what} is empty")
    if np.any(w < -CLAMP_TOL):
        raise BadSpec(f"{what} has a negative entry {w.min():.3g}")
    w[w < 0] = 0.0
    total = w.sum()
    if abs(total - 1.0) > VERTEX_SUM_TOL:
        raise BadSpec(f"{what} sums to {total:.17g}")
    return w


@dataclass(frozen=True, eq=False)
class MeasureVector:
    """A probability vector over the scenario indices."""

    weights: np.ndarray

    def __post_init__(self):
        w = _check_probability_vector(self.weights, "measure")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def __repr__(self):
        return f"MeasureVector({np.array2string(self.weights, precision=6)})"


class AmbiguitySet:
    """Convex hull of probability vectors ``vertices`` (one per row)."""

    def __init__(self, vertices):
        V = np.array(vertices, dtype=float)
        if V.size == 0:
            raise EmptyAmbiguitySet("the ambiguity set needs at least one vertex")
        if V.ndim == 1:
            V = V[None, :]
        if V.ndim != 2:
            raise BadSpec("vertices must form a 2-d array")
        V = np.array([_check_probability_vector(v, f"vertex {i}") for i, v in enumerate(V)])
        V.setflags(write=False)
        self.vertices = V

    @classmethod
    def simplex(cls, M):
        """Every probability vector on ``M`` scenarios."""
        return cls(np.eye(M))

    @property
    def gamma_count(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def convex_weights(self, weights, tol=MEMBERSHIP_TOL):
        """Coefficients expressing ``weights`` as a vertex combination, or ``None`` if outside."""
        w = np.asarray(getattr(weights, "weights", weights), dtype=float)
        if w.shape != (self.gamma_count,):
            raise ShapeMismatch(f"measure has length {w.size}, expected {self.gamma_count}")
        system = np.vstack([self.vertices.T, np.ones(self.n_vertices)])
        coef, resid = nnls(system, np.append(w, 1.0))
        return coef if resid <= tol else None

    def contains(self, weights, tol=MEMBERSHIP_TOL):
        return self.convex_weights(weights, tol) is not None


def _as_weights(amb, lam):
    w = np.asarray(getattr(lam, "weights", lam), dtype=float)
    if not amb.contains(w):
        raise MeasureNotInSet(f"measure {np.array2string(w, precision=6)} is not in the ambiguity set")
    return w


def _check_sizes(model, amb):
    if amb is not None and amb.gamma_count != model.n_scenarios:
        raise ShapeMismatch(f"ambiguity set covers {amb.gamma_count} scenarios, model has {model.n_scenarios}")


def scenario_costs(ps: PathSpace, model: ScenarioModel, u: AdaptedProcess) -> np.ndarray:
    """``y_gamma(0)`` for every scenario index."""
    return np.array([scenario_cost(ps, model, g, u) for g in range(model.n_scenarios)])


def robust_cost(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet, u: AdaptedProcess,
                costs=None):
    """``(max over vertices of sum_gamma lambda_gamma y_gamma(0), maximizing vertex index)``.

    Ties go to the smallest vertex index.
    """
    _check_sizes(model, ambiguity)
    y = scenario_costs(ps, model, u) if costs is None else np.asarray(costs, dtype=float)
    values = ambiguity.vertices @ y
    best = int(np.argmax(values))
    return float(values[best]), best


@dataclass
class ActiveFace:
    """Vertices of the ambiguity set attaining the robust cost, and their convex hull."""

    value: float
    vertex_indices: list
    vertices: np.ndarray
    costs: np.ndarray

    @property
    def measures(self):
        return [MeasureVector(v) for v in self.vertices]

    def __len__(self):
        return len(self.vertex_indices)

    def __iter__(self):
        return iter(self.measures)

    def combine(self, w) -> MeasureVector:
        """The face point ``sum_j w_j vertex_j`` for simplex weights ``w``."""
        w = _check_probability_vector(w, "face weights")
        if w.shape != (len(self),):
            raise ShapeMismatch(f"need {len(self)} face weights, got {w.size}")
        return MeasureVector(w @ self.vertices)

    def contains(self, weights, tol=MEMBERSHIP_TOL):
        return AmbiguitySet(self.vertices).contains(weights, tol)


def active_measure_set(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet,
                       u_star: AdaptedProcess, tol: float = ACTIVE_TOL, costs=None) -> ActiveFace:
    """Vertices whose expected cost is within ``tol`` of ``J(u*)``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_sizes(model, ambiguity)
    y = scenario_costs(ps, model, u_star) if costs is None else np.asarray(costs, dtype=float)
    values = ambiguity.vertices @ y
    top = float(values.max())
    idx = [int(i) for i in np.flatnonzero(values >= top - tol)]
    return ActiveFace(top, idx, ambiguity.vertices[idx], y)


def scenario_gradients(ps: PathSpace, model: ScenarioModel, u_star: AdaptedProcess) -> list:
    """``d_u H_gamma`` along ``u*`` for every scenario: ``out[gamma][k]`` has shape ``(n_k, m)``."""
    out = []
    for g in range(model.n_scenarios):
        lin = linearize(ps, model, g, u_star)
        out.append(hamiltonian_gradients(lin, solve_adjoint_recursive(ps, model, g, u_star, lin)))
    return out


def _bounds(model, k):
    box = model.control_sets[k]
    m = model.control_dim
    if box is None:
        return np.full(m, -np.inf), np.full(m, np.inf)
    return box.lo, box.hi


def _kkt_violation(g, u, lo, hi):
    """Componentwise violation of the box variational inequality, shape of ``g``."""
    at_lo = np.isfinite(lo) & (np.abs(u - lo) <= BOUND_TOL * (1.0 + np.abs(lo)))
    at_hi = np.isfinite(hi) & (np.abs(u - hi) <= BOUND_TOL * (1.0 + np.abs(hi)))
    out = np.abs(g)
    out = np.where(at_lo, np.maximum(0.0, -g), out)
    out = np.where(at_hi, np.maximum(0.0, g), out)
    return np.where(at_lo & at_hi, 0.0, out)


@dataclass
class StationarityTable:
    """Node-wise violation of the averaged Hamiltonian variational inequality."""

    max_residual: float
    residuals: list  # residuals[k] has shape (n_k,)
    gradients: list  # averaged d_u H, gradients[k] has shape (n_k, m)

    def rows(self):
        for k, res in enumerate(self.residuals):
            for node, r in enumerate(res):
                yield k, node, float(r)


def stationarity_residual(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet,
                          u_star: AdaptedProcess, lam, grads=None) -> StationarityTable:
    """KKT violation of ``sum_gamma lambda_gamma d_u H_gamma`` at every node.

    A component counts as sitting on a bound when it is within
    ``1e-12 (1 + |bound|)`` of it.
    """
    _check_sizes(model, ambiguity)
    w = _as_weights(ambiguity, lam)
    check_control(ps, model, u_star)
    grads = scenario_gradients(ps, model, u_star) if grads is None else grads
    residuals, averaged = [], []
    for k in range(model.horizon):
        g = sum(w[j] * grads[j][k] for j in range(len(w)))
        lo, hi = _bounds(model, k)
        averaged.append(g)
        residuals.append(np.max(_kkt_violation(g, u_star[k], lo, hi), axis=-1, initial=0.0))
    top = max(float(np.max(r, initial=0.0)) for r in residuals)
    return StationarityTable(top, residuals, averaged)


def _simplex_grid(F, density):
    """All weight vectors on the ``F``-simplex with coordinates in ``{0, 1/(density-1), ...}``.

    Rows come in lexicographic order of the first coordinate descending, so
    the first row is the first face vertex.
    """
    steps = density - 1
    rows = [c for c in itertools.product(range(steps, -1, -1), repeat=F - 1) if sum(c) <= steps]
    return np.array([list(c) + [steps - sum(c)] for c in rows], dtype=float) / steps


def _direction_extent(model, u_star, radius):
    """Per stage, the admissible step range ``[lo_eff - u*, hi_eff - u*]`` per node and component."""
    out = []
    for k in range(model.horizon):
        lo, hi = _bounds(model, k)
        u = u_star[k]
        lo_eff = np.where(np.isfinite(lo), lo, u - radius)
        hi_eff = np.where(np.isfinite(hi), hi, u + radius)
        out.append((lo_eff - u, hi_eff - u))
    return out


def default_direction_grid(ps: PathSpace, model: ScenarioModel, u_star: AdaptedProcess,
                           radius: float = 1.0, n_random: int = 8, seed: int = 0) -> list:
    """Box-vertex moves of single ``(stage, node, component)`` entries plus seeded random controls.

    Unbounded components move by at most ``radius``.  Every returned control
    is admissible.
    """
    ext = _direction_extent(model, u_star, radius)
    dirs = []
    for k in range(model.horizon):
        low, high = ext[k]
        for node, comp in np.ndindex(*u_star[k].shape):
            for bound in (low, high):
                if bound[node, comp] == 0.0:
                    continue
                vals = [v.copy() for v in u_star.values]
                vals[k][node, comp] += bound[node, comp]
                dirs.append(AdaptedProcess(0, vals))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        vals = []
        for k in range(model.horizon):
            low, high = ext[k]
            vals.append(u_star[k] + low + rng.random(low.shape) * (high - low))
        dirs.append(AdaptedProcess(0, vals))
    return dirs


@dataclass
class CommonMeasureReport:
    face_vertices: list
    grid_density: int
    grid_points: int
    direction_count: int
    radius: float
    method: str
    sup_inf_on_grid: float
    inf_sup_on_grid: float
    weak_duality_holds: bool
    note: str = field(default=(
        "The infimum over directions is exact over the box (unbounded components limited to the "
        "stated radius) for each measure on the grid; the max-min versus min-max comparison uses "
        "only the finite direction grid, so it does not prove that one measure serves every "
        "direction."))


class CommonMeasure(NamedTuple):
    measure: MeasureVector
    certified_inf: float
    report: CommonMeasureReport


def _inf_over_box(gs, ext, probs):
    """Exact ``inf`` of ``sum_k E[g(k) . du(k)]`` over the step box, for each row of a batch of gradients."""
    total = 0.0
    for g, (low, high), p in zip(gs, ext, probs):
        per = np.minimum(g * low, g * high).sum(axis=-1)
        total = total + per @ p
    return total


def find_common_reference_measure(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet,
                                  u_star: AdaptedProcess, direction_grid=None,
                                  lambda_grid_density: int = 101, radius: float = 1.0, seed: int = 0,
                                  active_tol: float = ACTIVE_TOL, polish: bool = True) -> CommonMeasure:
    """Search the active face for a measure under which no direction decreases the cost to first order.

    For each measure on a ``lambda_grid_density``-per-axis grid over the
    active face, the infimum of ``sum_gamma lambda_gamma y_bar^u_gamma(0)``
    over admissible directions is evaluated in closed form.  The best grid
    point is returned unless a linear program over the whole face finds a
    strictly better one.
    """
    if lambda_grid_density < 2:
        raise ValueError("lambda_grid_density must be at least 2")
    _check_sizes(model, ambiguity)
    check_control(ps, model, u_star)
    face = active_measure_set(ps, model, ambiguity, u_star, active_tol)
    if len(face) == 0:
        raise EmptyActiveSet("no vertex attains the robust cost")
    F = len(face)
    grads = scenario_gradients(ps, model, u_star)
    # gradients of each face vertex's averaged Hamiltonian
    face_grads = [np.stack([sum(v[j] * grads[j][k] for j in range(len(v))) for v in face.vertices])
                  for k in range(model.horizon)]
    probs = [ps.node_probabilities(k) for k in range(model.horizon)]
    ext = _direction_extent(model, u_star, radius)

    count = 1 if F == 1 else int(np.prod([lambda_grid_density - 1 + i for i in range(1, F)])
                                  // np.prod(range(1, F)))
    if count > MAX_LAMBDA_GRID:
        raise GridTooLarge(f"measure grid would have {count} points")
    W = np.ones((1, 1)) if F == 1 else _simplex_grid(F, lambda_grid_density)
    batched = [np.einsum("gj,jpm->gpm", W, fg) for fg in face_grads]
    infs = _inf_over_box(batched, ext, probs)
    best = int(np.argmax(infs))
    best_w, best_inf, method = W[best], float(infs[best]), "grid"

    if polish and F > 1:
        w_lp, v_lp = _polish(face_grads, ext, probs)
        if w_lp is not None and v_lp > best_inf + 1e-12:
            best_w, best_inf, method = w_lp, v_lp, "linear program"

    if direction_grid is None:
        direction_grid = default_direction_grid(ps, model, u_star, radius, seed=seed)
    for u in direction_grid:
        check_control(ps, model, u)
    if direction_grid:
        # L[lambda, direction] = sum_k E[g_lambda(k) . (u(k) - u*(k))]
        steps = [np.stack([u[k] - u_star[k] for u in direction_grid]) for k in range(model.horizon)]
        L = sum(np.einsum("gpm,dpm,p->gd", b, s, p) for b, s, p in zip(batched, steps, probs))
        sup_inf = float(L.min(axis=1).max())
        inf_sup = float(L.max(axis=0).min())
    else:
        sup_inf = inf_sup = float("nan")
    report = CommonMeasureReport(
        face_vertices=list(face.vertex_indices), grid_density=lambda_grid_density,
        grid_points=len(W), direction_count=len(direction_grid), radius=radius, method=method,
        sup_inf_on_grid=sup_inf, inf_sup_on_grid=inf_sup,
        weak_duality_holds=bool(not direction_grid or sup_inf <= inf_sup + 1e-12))
    return CommonMeasure(face.combine(np.clip(best_w, 0.0, None) / np.clip(best_w, 0.0, None).sum()),
                         best_inf, report)


def _polish(face_grads, ext, probs):
    """Maximize the concave piecewise-linear ``inf`` over the face weights by linear programming.

    Variables are the face weights ``w`` followed by one epigraph variable
    per (stage, node, component) entry.
    """
    F = face_grads[0].shape[0]
    rows, rhs, cost = [], [], []
    blocks = []
    for fg, (low, high), p in zip(face_grads, ext, probs):
        G = fg.reshape(F, -1)  # (F, entries)
        lo, hi = low.ravel(), high.ravel()
        blocks.append((G, lo, hi, np.repeat(p, fg.shape[-1])))
    n_t = sum(b[0].shape[1] for b in blocks)
    offset = F
    for G, lo, hi, pw in blocks:
        E = G.shape[1]
        for bound in (lo, hi):
            A = np.zeros((E, F + n_t))
            A[:, :F] = -(G * bound).T
            A[np.arange(E), offset + np.arange(E)] = 1.0
            rows.append(A)
            rhs.append(np.zeros(E))
        cost.append(-pw)
        offset += E
    c = np.concatenate([np.zeros(F)] + cost)
    A_eq = np.zeros((1, F + n_t))
    A_eq[0, :F] = 1.0
    bounds = [(0.0, 1.0)] * F + [(None, None)] * n_t
    res = linprog(c, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs), A_eq=A_eq, b_eq=[1.0],
                  bounds=bounds, method="highs")
    if not res.success:
        return None, -np.inf
    w = res.x[:F]
    value = float(_inf_over_box([np.einsum("j,jpm->pm", w, fg) for fg in face_grads], ext, probs))
    return w, value


@dataclass
class SufficiencyCertificate:
    status: str  # "Optimal", "NotConvex", "NotStationary" or "NotApplicable"
    convexity: str
    stationarity: float | None
    tol: float

    @property
    def optimal(self):
        return self.status == "Optimal"


def check_sufficiency(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet,
                      u_star: AdaptedProcess, lam, tol: float = 1e-8, assume_convex: bool = False,
                      active_tol: float = ACTIVE_TOL) -> SufficiencyCertificate:
    """Convexity of every scenario's Hamiltonian and terminal cost plus stationarity under ``lam``."""
    _check_sizes(model, ambiguity)
    w = np.asarray(getattr(lam, "weights", lam), dtype=float)
    if not ambiguity.contains(w):
        return SufficiencyCertificate("NotApplicable", "measure is outside the ambiguity set", None, tol)
    face = active_measure_set(ps, model, ambiguity, u_star, active_tol)
    if abs(w @ face.costs - face.value) > active_tol:
        return SufficiencyCertificate("NotApplicable", "measure does not attain the robust cost", None, tol)

    reasons = []
    for g in range(model.n_scenarios):
        verdict = model.coeffs(g).convexity()
        if verdict is None:
            if not assume_convex:
                raise UnsupportedFamily(
                    f"convexity of scenario {model.labels[g]} cannot be decided; pass assume_convex")
            verdict = (True, "assumed convex")
        ok, why = verdict
        if not ok:
            return SufficiencyCertificate("NotConvex", f"scenario {model.labels[g]}: {why}", None, tol)
        reasons.append(why)
    convexity = "; ".join(sorted(set(reasons)))
    res = stationarity_residual(ps, model, ambiguity, u_star, w).max_residual
    status = "Optimal" if res <= tol else "NotStationary"
    return SufficiencyCertificate(status, convexity, res, tol)


def solve_stationary_control(ps: PathSpace, model: ScenarioModel, weights, tol: float = 1e-8) -> AdaptedProcess:
    """The control with ``sum_gamma w_gamma d_u H_gamma = 0`` at every node, for affine-quadratic models.

    Without control constraints and with affine dynamics and quadratic costs
    the averaged gradient is an affine map of the control, so it is probed at
    zero and along each coordinate and the resulting linear system is solved.
    """
    if any(box is not None for box in model.control_sets):
        raise UnsupportedFamily("stationary solve requires unconstrained controls")
    w = _check_probability_vector(weights, "weights")
    if w.shape != (model.n_scenarios,):
        raise ShapeMismatch(f"need {model.n_scenarios} weights, got {w.size}")
    shapes = [(ps.n_nodes(k), model.control_dim) for k in range(model.horizon)]
    sizes = [a * b for a, b in shapes]
    cuts = np.cumsum(sizes)[:-1]

    def unpack(vec):
        return AdaptedProcess(0, [c.reshape(s) for c, s in zip(np.split(vec, cuts), shapes)])

    def residual(vec):
        grads = scenario_gradients(ps, model, unpack(vec))
        return np.concatenate([sum(w[j] * grads[j][k] for j in range(len(w))).ravel()
                               for k in range(model.horizon)])

    D = sum(sizes)
    base = residual(np.zeros(D))
    J = np.empty((D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = 1.0
        J[:, i] = residual(e) - base
    sol = np.linalg.solve(J, -base)
    check = residual(sol)
    if np.max(np.abs(check)) > tol * (1.0 + np.max(np.abs(base))):
        raise UnsupportedFamily("the averaged Hamiltonian gradient is not affine in the control")
    return unpack(sol)
