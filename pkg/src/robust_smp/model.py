"""Controlled-system coefficients over a finite scenario set.

Coefficient evaluators are batched: ``x`` has shape ``(..., n)``, ``u`` has
shape ``(..., m)`` and ``nodes`` is an integer array (or ``None``) that
broadcasts against the leading axes and identifies the tree node of each
entry, so that node-adapted coefficients can be looked up.  Evaluators must
be pure functions of their arguments.

Scenarios are addressed by their 0-based index into ``ScenarioModel.labels``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import BadSpec, ShapeMismatch

SYM_TOL = 1e-12
DEFAULT_BOUND = 1e3
PSD_TOL = 1e-12


def min_eigenvalue(H):
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        return 0.0
    return float(np.min(np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))))


class Derivatives(NamedTuple):
    """Partial derivatives at a batch of points.

    ``sx[..., i, :, :]`` and ``su[..., i, :, :]`` belong to diffusion column
    ``i``.  At the terminal stage only ``phi_x`` is populated.
    """

    bx: Optional[np.ndarray] = None  # (..., n, n)
    bu: Optional[np.ndarray] = None  # (..., n, m)
    sx: Optional[np.ndarray] = None  # (..., d, n, n)
    su: Optional[np.ndarray] = None  # (..., d, n, m)
    fx: Optional[np.ndarray] = None  # (..., n)
    fu: Optional[np.ndarray] = None  # (..., m)
    phi_x: Optional[np.ndarray] = None  # (..., n)


@dataclass(frozen=True, eq=False)
class Box:
    """Control set ``[lo, hi]`` (componentwise)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).ravel()
        hi = np.array(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise BadSpec("box bounds have different lengths")
        if np.any(lo > hi):
            raise BadSpec("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def slack(self, u):
        """Largest distance by which any entry of ``u`` leaves the box."""
        u = np.asarray(u, dtype=float)
        return float(max(np.max(self.lo - u, initial=0.0), np.max(u - self.hi, initial=0.0)))

    def project(self, u):
        return np.clip(u, self.lo, self.hi)


class Coefficients:
    """Evaluator interface for one scenario: ``b``, ``sigma``, ``f``, ``phi`` and partials."""

    def drift(self, k, x, u, nodes=None):
        raise NotImplementedError

    def diffusion(self, k, x, u, nodes=None):
        """Shape ``(..., n, d)``; column ``i`` multiplies ``B^i(k+1)``."""
        raise NotImplementedError

    def running_cost(self, k, x, u, nodes=None):
        raise NotImplementedError

    def terminal_cost(self, x, nodes=None):
        raise NotImplementedError

    def derivatives(self, k, x, u, nodes=None) -> Derivatives:
        raise NotImplementedError

    def terminal_gradient(self, x, nodes=None):
        raise NotImplementedError

    def convexity(self, tol=PSD_TOL):
        """``(convex, reason)`` when joint convexity of ``H`` and ``phi`` is decidable, else ``None``."""
        return None


class AffineQuadratic(Coefficients):
    """``b = A x + B u + a``, ``sigma^i = C^i x + D^i u + c^i`` and quadratic costs.

    Arrays are indexed by stage first: ``A[k]`` is ``n x n``, ``C[k, i]`` is
    the ``i``-th diffusion column's ``n x n`` matrix, and so on.  ``S``, ``s``
    define ``phi(x) = x'Sx/2 + s'x``.
    """

    def __init__(self, A, B, a, C, D, c, Q, R, q, r, S, s):
        self.A, self.B, self.a = A, B, a
        self.C, self.D, self.c = C, D, c
        self.Q, self.R, self.q, self.r = Q, R, q, r
        self.S, self.s = S, s

    def drift(self, k, x, u, nodes=None):
        return x @ self.A[k].T + u @ self.B[k].T + self.a[k]

    def diffusion(self, k, x, u, nodes=None):
        return (np.einsum("dij,...j->...id", self.C[k], x)
                + np.einsum("dij,...j->...id", self.D[k], u) + self.c[k].T)

    def running_cost(self, k, x, u, nodes=None):
        return (0.5 * np.einsum("...i,ij,...j->...", x, self.Q[k], x)
                + 0.5 * np.einsum("...i,ij,...j->...", u, self.R[k], u)
                + x @ self.q[k] + u @ self.r[k])

    def terminal_cost(self, x, nodes=None):
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.S, x) + x @ self.s

    def derivatives(self, k, x, u, nodes=None):
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return Derivatives(
            bx=np.broadcast_to(self.A[k], lead + self.A[k].shape),
            bu=np.broadcast_to(self.B[k], lead + self.B[k].shape),
            sx=np.broadcast_to(self.C[k], lead + self.C[k].shape),
            su=np.broadcast_to(self.D[k], lead + self.D[k].shape),
            fx=np.broadcast_to(x @ self.Q[k] + self.q[k], lead + self.q[k].shape),
            fu=np.broadcast_to(u @ self.R[k] + self.r[k], lead + self.r[k].shape),
        )

    def terminal_gradient(self, x, nodes=None):
        return x @ self.S + self.s

    def convexity(self, tol=PSD_TOL):
        # dynamics are affine, so only the cost Hessians matter
        for k in range(len(self.Q)):
            for name, H in zip(("Q", "R"), self.hessian_blocks(k)):
                low = min_eigenvalue(H)
                if low < -tol:
                    return False, f"{name}[{k}] has eigenvalue {low:.3g}"
        low = min_eigenvalue(self.S)
        if low < -tol:
            return False, f"S has eigenvalue {low:.3g}"
        return True, "affine dynamics with positive semidefinite cost Hessians"

    def hessian_blocks(self, k):
        """Cost Hessian blocks ``(Q_k, R_k)``; the ``(x, u)`` cross block is zero."""
        return self.Q[k], self.R[k]


class PointwiseCoefficients(Coefficients):
    """Wrap user-supplied single-point functions into the batched interface.

    Every callable takes ``(k, x, u)`` (``phi`` and ``dphi_dx`` take ``x``)
    with 1-D ``x`` and ``u`` and returns an array of the documented shape.
    Loops in Python; intended for small trees.
    """

    def __init__(self, n, m, d, b, sigma, f, phi, db_dx, db_du, dsigma_dx, dsigma_du,
                 df_dx, df_du, dphi_dx):
        self.n, self.m, self.d = n, m, d
        self._b, self._sigma, self._f, self._phi = b, sigma, f, phi
        self._db_dx, self._db_du = db_dx, db_du
        self._ds_dx, self._ds_du = dsigma_dx, dsigma_du
        self._df_dx, self._df_du, self._dphi_dx = df_dx, df_du, dphi_dx

    def _map(self, fn, out_shape, x, u=None):
        lead = x.shape[:-1] if u is None else np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        xb = np.broadcast_to(x, lead + (x.shape[-1],))
        ub = None if u is None else np.broadcast_to(u, lead + (u.shape[-1],))
        out = np.empty(lead + out_shape)
        for idx in np.ndindex(*lead):
            out[idx] = fn(xb[idx]) if ub is None else fn(xb[idx], ub[idx])
        return out

    def drift(self, k, x, u, nodes=None):
        return self._map(lambda xi, ui: self._b(k, xi, ui), (self.n,), x, u)

    def diffusion(self, k, x, u, nodes=None):
        return self._map(lambda xi, ui: self._sigma(k, xi, ui), (self.n, self.d), x, u)

    def running_cost(self, k, x, u, nodes=None):
        return self._map(lambda xi, ui: self._f(k, xi, ui), (), x, u)

    def terminal_cost(self, x, nodes=None):
        return self._map(self._phi, (), x)

    def derivatives(self, k, x, u, nodes=None):
        n, m, d = self.n, self.m, self.d
        return Derivatives(
            bx=self._map(lambda xi, ui: self._db_dx(k, xi, ui), (n, n), x, u),
            bu=self._map(lambda xi, ui: self._db_du(k, xi, ui), (n, m), x, u),
            sx=self._map(lambda xi, ui: self._ds_dx(k, xi, ui), (d, n, n), x, u),
            su=self._map(lambda xi, ui: self._ds_du(k, xi, ui), (d, n, m), x, u),
            fx=self._map(lambda xi, ui: self._df_dx(k, xi, ui), (n,), x, u),
            fu=self._map(lambda xi, ui: self._df_du(k, xi, ui), (m,), x, u),
        )

    def terminal_gradient(self, x, nodes=None):
        return self._map(self._dphi_dx, (self.n,), x)


@dataclass(frozen=True, eq=False)
class ScenarioModel:
    """The controlled system for every scenario ``gamma`` in a finite set."""

    labels: tuple
    state_dim: int
    control_dim: int
    noise_dim: int
    horizon: int
    x0: np.ndarray
    coefficients: tuple
    control_sets: tuple = field(default=None)

    def __post_init__(self):
        if len(self.labels) < 1 or len(self.labels) != len(self.coefficients):
            raise BadSpec("need one coefficient evaluator per scenario label")
        x0 = np.array(self.x0, dtype=float).ravel()
        if x0.shape != (self.state_dim,):
            raise ShapeMismatch(f"x0 has shape {x0.shape}, expected ({self.state_dim},)")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        sets = self.control_sets
        if sets is None:
            sets = (None,) * self.horizon
        sets = tuple(sets)
        if len(sets) != self.horizon:
            raise BadSpec(f"need {self.horizon} control sets, got {len(sets)}")
        for k, box in enumerate(sets):
            if box is not None and box.lo.shape != (self.control_dim,):
                raise ShapeMismatch(f"control box at stage {k} has dimension {box.lo.shape}")
        object.__setattr__(self, "control_sets", sets)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "coefficients", tuple(self.coefficients))

    @property
    def n_scenarios(self):
        return len(self.labels)

    def coeffs(self, gamma) -> Coefficients:
        if not (0 <= gamma < len(self.labels)):
            raise IndexError(f"scenario index {gamma} outside 0..{len(self.labels) - 1}")
        return self.coefficients[gamma]

    def with_control_sets(self, control_sets):
        return ScenarioModel(self.labels, self.state_dim, self.control_dim, self.noise_dim,
                             self.horizon, self.x0, self.coefficients, control_sets)


@dataclass(frozen=True, eq=False)
class LqFamilySpec:
    """Affine-quadratic coefficients for every ``(gamma, k)``.

    Arrays carry the scenario axis first and the stage axis second, e.g.
    ``A`` has shape ``(M, N, n, n)`` and ``C`` has shape ``(M, N, d, n, n)``.
    ``S`` and ``s`` have shapes ``(M, n, n)`` and ``(M, n)``.
    """

    A: np.ndarray
    B: np.ndarray
    a: np.ndarray
    C: np.ndarray
    D: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray
    S: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "a", "C", "D", "c", "Q", "R", "q", "r", "S", "s"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise BadSpec(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.A.ndim != 4:
            raise ShapeMismatch("A must have shape (M, N, n, n)")
        M, N, n, _ = self.A.shape
        m = self.B.shape[-1]
        d = self.C.shape[2] if self.C.ndim == 5 else -1
        expected = {
            "A": (M, N, n, n), "B": (M, N, n, m), "a": (M, N, n),
            "C": (M, N, d, n, n), "D": (M, N, d, n, m), "c": (M, N, d, n),
            "Q": (M, N, n, n), "R": (M, N, m, m), "q": (M, N, n), "r": (M, N, m),
            "S": (M, n, n), "s": (M, n),
        }
        bad = [f"{k} has shape {getattr(self, k).shape}, expected {v}"
               for k, v in expected.items() if getattr(self, k).shape != v]
        if bad:
            raise ShapeMismatch("; ".join(bad))
        for name in ("Q", "R", "S"):
            arr = getattr(self, name)
            if np.max(np.abs(arr - np.swapaxes(arr, -1, -2)), initial=0.0) > SYM_TOL:
                raise BadSpec(f"{name} is not symmetric")

    @property
    def dims(self):
        """``(M, N, n, m, d)``."""
        M, N, n, _ = self.A.shape
        return M, N, n, self.B.shape[-1], self.C.shape[2]

    @classmethod
    def zeros(cls, M, N, n, m, d):
        return cls(
            A=np.zeros((M, N, n, n)), B=np.zeros((M, N, n, m)), a=np.zeros((M, N, n)),
            C=np.zeros((M, N, d, n, n)), D=np.zeros((M, N, d, n, m)), c=np.zeros((M, N, d, n)),
            Q=np.zeros((M, N, n, n)), R=np.zeros((M, N, m, m)), q=np.zeros((M, N, n)),
            r=np.zeros((M, N, m)), S=np.zeros((M, n, n)), s=np.zeros((M, n)),
        )

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in ("A", "B", "a", "C", "D", "c", "Q", "R", "q", "r", "S", "s")}
        fields.update(changes)
        return LqFamilySpec(**fields)

    def scenario(self, gamma) -> AffineQuadratic:
        g = gamma
        return AffineQuadratic(self.A[g], self.B[g], self.a[g], self.C[g], self.D[g], self.c[g],
                               self.Q[g], self.R[g], self.q[g], self.r[g], self.S[g], self.s[g])


def build_lq_model(spec: LqFamilySpec, x0, control_sets=None, labels=None) -> ScenarioModel:
    M, N, n, m, d = spec.dims
    labels = tuple(range(1, M + 1)) if labels is None else tuple(labels)
    return ScenarioModel(labels, n, m, d, N, x0, tuple(spec.scenario(g) for g in range(M)),
                         control_sets)


def _point_args(model, x, u):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ShapeMismatch(f"x has shape {x.shape}, expected ({model.state_dim},)")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (model.control_dim,):
            raise ShapeMismatch(f"u has shape {u.shape}, expected ({model.control_dim},)")
    return x, u


def _check_stage(model, k, terminal_ok=False):
    top = model.horizon if terminal_ok else model.horizon - 1
    if not (0 <= k <= top):
        raise ShapeMismatch(f"stage {k} outside 0..{top}")


def eval_dynamics(model: ScenarioModel, gamma: int, k: int, x, u, node: int = 0):
    """``(b_gamma(k, x, u), sigma_gamma(k, x, u))`` at a single point."""
    _check_stage(model, k)
    x, u = _point_args(model, x, u)
    co = model.coeffs(gamma)
    nodes = np.asarray(node)
    drift = np.asarray(co.drift(k, x, u, nodes), dtype=float)
    diffusion = np.asarray(co.diffusion(k, x, u, nodes), dtype=float)
    if drift.shape != (model.state_dim,) or diffusion.shape != (model.state_dim, model.noise_dim):
        raise ShapeMismatch(f"evaluator returned drift {drift.shape} and diffusion {diffusion.shape}")
    return drift, diffusion


def eval_costs(model: ScenarioModel, gamma: int, k: int, x, u=None, node: int = 0) -> float:
    """Running cost ``f_gamma(k, x, u)``, or ``phi_gamma(x)`` when ``k == N``."""
    _check_stage(model, k, terminal_ok=True)
    x, u = _point_args(model, x, u)
    co = model.coeffs(gamma)
    if k == model.horizon:
        return float(co.terminal_cost(x, np.asarray(node)))
    return float(co.running_cost(k, x, u, np.asarray(node)))


def eval_derivatives(model: ScenarioModel, gamma: int, k: int, x, u=None, node: int = 0) -> Derivatives:
    """All partials at ``(x, u)``; at ``k == N`` only ``phi_x`` is returned."""
    _check_stage(model, k, terminal_ok=True)
    x, u = _point_args(model, x, u)
    co = model.coeffs(gamma)
    nodes = np.asarray(node)
    if k == model.horizon:
        g = np.asarray(co.terminal_gradient(x, nodes), dtype=float)
        if g.shape != (model.state_dim,):
            raise ShapeMismatch(f"terminal gradient has shape {g.shape}")
        return Derivatives(phi_x=g)
    if u is None:
        raise ShapeMismatch("a control value is required before the terminal stage")
    der = co.derivatives(k, x, u, nodes)
    n, m, d = model.state_dim, model.control_dim, model.noise_dim
    expected = dict(bx=(n, n), bu=(n, m), sx=(d, n, n), su=(d, n, m), fx=(n,), fu=(m,))
    out = {}
    for name, shape in expected.items():
        val = np.array(getattr(der, name), dtype=float)
        if val.shape != shape:
            raise ShapeMismatch(f"{name} has shape {val.shape}, expected {shape}")
        out[name] = val
    return Derivatives(**out)


@dataclass(frozen=True)
class Violation:
    gamma: int
    stage: int
    x: tuple
    u: tuple
    quantity: str
    value: float
    limit: float


@dataclass
class AuditReport:
    """Outcome of :func:`validate_assumptions`; an empty list means no violation was seen on the grid."""

    bound: float
    points_checked: int
    violations: list

    @property
    def ok(self):
        return not self.violations


def validate_assumptions(model: ScenarioModel, sample_grid: Sequence, bound: float = DEFAULT_BOUND) -> AuditReport:
    """Check the derivative growth bounds at sampled ``(k, x, u)`` points.

    Matrices are measured in spectral norm and vectors in Euclidean norm.
    Diffusion derivatives are checked column by column.
    """
    if not sample_grid:
        raise ValueError("sample grid is empty")
    L = float(bound)
    violations = []
    zero_x = np.zeros(model.state_dim)
    zero_u = np.zeros(model.control_dim)
    for gamma in range(model.n_scenarios):
        for k, x, u in sample_grid:
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            grow = L * (1.0 + np.linalg.norm(x) + np.linalg.norm(u))
            der = eval_derivatives(model, gamma, k, x, u)
            b0, s0 = eval_dynamics(model, gamma, k, zero_x, zero_u)
            f0 = eval_costs(model, gamma, k, zero_x, zero_u)
            phi_x = eval_derivatives(model, gamma, model.horizon, x).phi_x
            checks = [
                ("|b(k,0,0)|+|sigma(k,0,0)|", np.linalg.norm(b0) + np.linalg.norm(s0), L),
                ("|d_x b|", np.linalg.norm(der.bx, 2), L),
                ("|d_u b|", np.linalg.norm(der.bu, 2), L),
                ("|f(k,0,0)|", abs(f0), L),
                ("|d_x f|", np.linalg.norm(der.fx), grow),
                ("|d_u f|", np.linalg.norm(der.fu), grow),
                ("|d_x phi|", np.linalg.norm(phi_x), L * (1.0 + np.linalg.norm(x))),
            ]
            for i in range(model.noise_dim):
                checks.append((f"|d_x sigma^{i + 1}|", np.linalg.norm(der.sx[i], 2), L))
                checks.append((f"|d_u sigma^{i + 1}|", np.linalg.norm(der.su[i], 2), L))
            for name, value, limit in checks:
                if value > limit:
                    violations.append(Violation(gamma, k, tuple(x), tuple(u), name, float(value), float(limit)))
    return AuditReport(L, len(sample_grid) * model.n_scenarios, violations)
