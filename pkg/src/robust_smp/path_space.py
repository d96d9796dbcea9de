"""Finite probability spaces for the noise sequence.

A :class:`PathSpace` is a rooted tree whose depth-``k`` nodes are the atoms of
the sigma-field generated by ``B(1), ..., B(k)``.  Any quantity that is
measurable with respect to that sigma-field is stored as one value per
depth-``k`` node, so every expectation in the toolkit is an exact finite sum.

Two constructors exist:

* :func:`build_path_space` materializes the product tree of independent
  per-step atom sets (exact mode).
* :func:`empirical_path_space` merges common prefixes of sampled paths into a
  tree carrying the empirical measure (Monte Carlo mode).

Children of a node are stored contiguously and in increasing order, which lets
one conditional-expectation step be a single ``np.add.reduceat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadSpec, ShapeMismatch, StageOutOfRange, TreeTooLarge

PROB_TOL = 1e-12


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Independent finitely supported noise ``B(1), ..., B(N)`` in ``R^d``.

    ``steps[k-1]`` is a pair ``(values, probs)`` with ``values`` of shape
    ``(atoms, d)``.  With ``standardized=True`` every step must have zero mean
    and identity second moment.
    """

    horizon: int
    dim: int
    steps: tuple
    standardized: bool = False

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise BadSpec(f"horizon must be a positive integer, got {self.horizon!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise BadSpec(f"dim must be a positive integer, got {self.dim!r}")
        if len(self.steps) != self.horizon:
            raise BadSpec(f"expected {self.horizon} steps, got {len(self.steps)}")
        steps = []
        for k, (values, probs) in enumerate(self.steps, start=1):
            values = np.array(values, dtype=float)
            if values.ndim == 1 and self.dim == 1:
                values = values[:, None]
            probs = np.array(probs, dtype=float)
            if values.ndim != 2 or values.shape[1] != self.dim:
                raise BadSpec(f"step {k}: atom values must have shape (atoms, {self.dim})")
            if probs.shape != (values.shape[0],) or len(probs) == 0:
                raise BadSpec(f"step {k}: need one probability per atom")
            if not np.all(np.isfinite(values)):
                raise BadSpec(f"step {k}: atom values must be finite")
            if np.any(probs <= 0.0) or np.any(probs > 1.0):
                raise BadSpec(f"step {k}: probabilities must lie in (0, 1]")
            if abs(probs.sum() - 1.0) > PROB_TOL:
                raise BadSpec(f"step {k}: probabilities sum to {probs.sum()!r}, not 1")
            if self.standardized:
                mean = probs @ values
                second = values.T @ (probs[:, None] * values)
                if np.max(np.abs(mean)) > PROB_TOL or np.max(np.abs(second - np.eye(self.dim))) > PROB_TOL:
                    raise BadSpec(f"step {k}: atoms are not standardized (mean 0, covariance I)")
            steps.append((_readonly(values), _readonly(probs)))
        object.__setattr__(self, "steps", tuple(steps))

    @classmethod
    def iid(cls, horizon, values, probs, standardized=False):
        """The same atom set at every step."""
        return cls(horizon, np.asarray(values, float).reshape(len(probs), -1).shape[1],
                   tuple((values, probs) for _ in range(horizon)), standardized)

    def atom_counts(self):
        return [len(p) for _, p in self.steps]

    def step_mean(self, k):
        values, probs = self.steps[k - 1]
        return probs @ values

    def is_standardized(self, tol=PROB_TOL):
        for values, probs in self.steps:
            if np.max(np.abs(probs @ values)) > tol:
                return False
            if np.max(np.abs(values.T @ (probs[:, None] * values) - np.eye(self.dim))) > tol:
                return False
        return True


def fair_coin(horizon, dim=1):
    """Product of independent fair +-1 coins in each of ``dim`` components.

    Each step has ``2**dim`` atoms of probability ``2**-dim``; the resulting
    noise is standardized.
    """
    grid = np.array(np.meshgrid(*([[1.0, -1.0]] * dim), indexing="ij")).reshape(dim, -1).T
    probs = np.full(len(grid), 1.0 / len(grid))
    return NoiseSpec.iid(horizon, grid, probs, standardized=True)


@dataclass(frozen=True)
class SampledNoise:
    """Noise given by a sampler instead of atoms (Monte Carlo mode).

    ``sampler(rng, size)`` must return an array of shape ``(size, dim)`` of
    independent draws with finite fourth moments.
    """

    horizon: int
    dim: int
    sampler: Callable


def gaussian_noise(horizon, dim=1):
    return SampledNoise(horizon, dim, lambda rng, size: rng.standard_normal((size, dim)))


class PathSpace:
    """Scenario tree with node probabilities for stages ``0..N``.

    Instances are immutable once built; use :func:`build_path_space` or
    :func:`empirical_path_space` rather than calling the constructor.
    """

    def __init__(self, horizon, dim, parents, noise, cond_probs, spec=None, atom_paths=None):
        self.horizon = horizon
        self.dim = dim
        self.spec = spec
        # index 0 is the root stage and carries no parent/noise
        self._parents = [None] + [np.asarray(p, dtype=np.intp) for p in parents]
        self._noise = [None] + [_readonly(v) for v in noise]
        self._cond = [None] + [_readonly(c) for c in cond_probs]
        probs = [_readonly([1.0])]
        starts = [None]
        for k in range(1, horizon + 1):
            par = self._parents[k]
            par.setflags(write=False)
            if len(par) and np.any(np.diff(par) < 0):
                raise BadSpec("children must be stored contiguously per parent")
            probs.append(_readonly(probs[-1][par] * self._cond[k]))
            first = np.searchsorted(par, np.arange(len(probs[-2])))
            if np.any(np.bincount(par, minlength=len(probs[-2])) == 0):
                raise BadSpec(f"stage {k - 1} has a node without children")
            starts.append(first)
        self._probs = probs
        self._starts = starts
        self._atom_paths = atom_paths
        self._ancestor_cache = {}

    def __repr__(self):
        return f"PathSpace(horizon={self.horizon}, dim={self.dim}, leaves={self.n_nodes(self.horizon)})"

    def _check_stage(self, k, lo=0):
        if not (lo <= k <= self.horizon):
            raise StageOutOfRange(f"stage {k} outside [{lo}, {self.horizon}]")

    def n_nodes(self, k):
        self._check_stage(k)
        return len(self._probs[k])

    def node_probabilities(self, k):
        self._check_stage(k)
        return self._probs[k]

    def transition_probabilities(self, k):
        """Probability of each stage-``k`` node given its parent."""
        self._check_stage(k, lo=1)
        return self._cond[k]

    def parents(self, k):
        self._check_stage(k, lo=1)
        return self._parents[k]

    def noise(self, k):
        """Values of ``B(k)`` at the stage-``k`` nodes, shape ``(n_k, d)``."""
        self._check_stage(k, lo=1)
        return self._noise[k]

    def atom_paths(self, k):
        """Atom-index prefixes of the stage-``k`` nodes (product trees only)."""
        self._check_stage(k)
        if self._atom_paths is None:
            raise BadSpec("atom paths are only defined for product trees")
        return self._atom_paths[k]

    def ancestors(self, k, j):
        """Index of the stage-``j`` ancestor of every stage-``k`` node."""
        self._check_stage(k)
        self._check_stage(j)
        if j > k:
            raise StageOutOfRange(f"ancestor stage {j} is after stage {k}")
        key = (k, j)
        if key not in self._ancestor_cache:
            idx = np.arange(self.n_nodes(k))
            for s in range(k, j, -1):
                idx = self._parents[s][idx]
            idx.setflags(write=False)
            self._ancestor_cache[key] = idx
        return self._ancestor_cache[key]

    def noise_history(self, k):
        """``(B(1), ..., B(k))`` at each stage-``k`` node, shape ``(n_k, k, d)``."""
        cols = [self._noise[s][self.ancestors(k, s)] for s in range(1, k + 1)]
        if not cols:
            return np.zeros((self.n_nodes(k), 0, self.dim))
        return np.stack(cols, axis=1)

    def lift(self, values, from_stage, to_stage):
        """Copy a stage-``from_stage`` array (nodes on axis 0) onto its stage-``to_stage`` descendants."""
        return np.asarray(values)[self.ancestors(to_stage, from_stage)]

    def condexp(self, values, from_stage, to_stage):
        """Exact ``E[values | F_to_stage]`` for an array indexed by stage-``from_stage`` nodes."""
        self._check_stage(from_stage)
        self._check_stage(to_stage)
        if to_stage > from_stage:
            raise StageOutOfRange(f"cannot condition stage {from_stage} on later stage {to_stage}")
        out = np.asarray(values, dtype=float)
        if out.shape[0] != self.n_nodes(from_stage):
            raise ShapeMismatch(
                f"expected {self.n_nodes(from_stage)} node values at stage {from_stage}, got {out.shape[0]}")
        for s in range(from_stage, to_stage, -1):
            w = self._cond[s].reshape((-1,) + (1,) * (out.ndim - 1))
            out = np.add.reduceat(w * out, self._starts[s], axis=0)
        return out

    def expect(self, values, stage):
        """Exact ``E[values]`` for an array indexed by stage nodes on axis 0."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n_nodes(stage):
            raise ShapeMismatch(f"expected {self.n_nodes(stage)} node values at stage {stage}")
        return np.tensordot(self._probs[stage], values, axes=(0, 0))


class AdaptedProcess:
    """Per-node values of an adapted process over consecutive stages.

    ``values[j]`` holds the stage ``first_stage + j`` values as an array of
    shape ``(n_nodes, *shape)``.  Measurability is structural: a stage-``k``
    value can only depend on the node, i.e. on ``B(1..k)``.
    """

    def __init__(self, first_stage, values):
        if not values:
            raise ShapeMismatch("an adapted process needs at least one stage")
        self.first_stage = int(first_stage)
        self.values = [np.asarray(v, dtype=float) for v in values]
        shapes = {v.shape[1:] for v in self.values}
        if len(shapes) != 1:
            raise ShapeMismatch(f"inconsistent value shapes across stages: {sorted(shapes)}")

    @property
    def last_stage(self):
        return self.first_stage + len(self.values) - 1

    @property
    def stages(self):
        return range(self.first_stage, self.last_stage + 1)

    @property
    def shape(self):
        return self.values[0].shape[1:]

    def __getitem__(self, k):
        if k not in self.stages:
            raise StageOutOfRange(f"stage {k} outside [{self.first_stage}, {self.last_stage}]")
        return self.values[k - self.first_stage]

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"AdaptedProcess(stages={self.first_stage}..{self.last_stage}, shape={self.shape})"

    @classmethod
    def zeros(cls, ps, stages, shape=()):
        stages = range(stages.start, stages.stop)
        return cls(stages.start, [np.zeros((ps.n_nodes(k),) + tuple(shape)) for k in stages])

    @classmethod
    def constant(cls, ps, stages, value):
        value = np.asarray(value, dtype=float)
        return cls(stages.start, [np.broadcast_to(value, (ps.n_nodes(k),) + value.shape).copy()
                                  for k in stages])

    @classmethod
    def deterministic(cls, ps, first_stage, per_stage):
        """One value per stage, replicated across that stage's nodes."""
        per_stage = [np.asarray(v, dtype=float) for v in per_stage]
        return cls(first_stage, [np.broadcast_to(v, (ps.n_nodes(first_stage + j),) + v.shape).copy()
                                 for j, v in enumerate(per_stage)])

    @classmethod
    def from_function(cls, ps, stages, fn):
        """Build from ``fn(k, history)`` where ``history`` is ``noise_history(k)``."""
        return cls(stages.start, [np.asarray(fn(k, ps.noise_history(k)), dtype=float) for k in stages])

    def _combine(self, other, op):
        if not isinstance(other, AdaptedProcess):
            return AdaptedProcess(self.first_stage, [op(v, other) for v in self.values])
        if other.stages != self.stages:
            raise ShapeMismatch("adapted processes cover different stages")
        return AdaptedProcess(self.first_stage, [op(a, b) for a, b in zip(self.values, other.values)])

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar):
        return AdaptedProcess(self.first_stage, [v * scalar for v in self.values])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def max_abs_diff(self, other):
        """Largest componentwise deviation over all stages and nodes."""
        if other.stages != self.stages:
            raise ShapeMismatch("adapted processes cover different stages")
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(self.values, other.values))

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values)

    def validate(self, ps, stages, shape):
        """Raise unless the process covers ``stages`` on ``ps`` with value ``shape``."""
        if self.stages != range(stages.start, stages.stop):
            raise StageOutOfRange(
                f"process covers stages {self.first_stage}..{self.last_stage}, "
                f"expected {stages.start}..{stages.stop - 1}")
        for k in self.stages:
            expected = (ps.n_nodes(k),) + tuple(shape)
            if self[k].shape != expected:
                raise ShapeMismatch(f"stage {k}: values have shape {self[k].shape}, expected {expected}")


def build_path_space(spec: NoiseSpec, max_leaves: int = 10**6) -> PathSpace:
    """Materialize the product tree of ``spec`` in lexicographic atom order."""
    counts = spec.atom_counts()
    leaves = math.prod(counts)
    if leaves > max_leaves:
        raise TreeTooLarge(f"tree has {leaves} leaves, limit is {max_leaves}")
    parents, noise, cond, atom_paths = [], [], [], [np.zeros((1, 0), dtype=np.intp)]
    n_prev = 1
    for k, (values, probs) in enumerate(spec.steps, start=1):
        a = len(probs)
        parents.append(np.repeat(np.arange(n_prev), a))
        atom = np.tile(np.arange(a), n_prev)
        noise.append(values[atom])
        cond.append(probs[atom])
        paths = np.concatenate([np.repeat(atom_paths[-1], a, axis=0), atom[:, None]], axis=1)
        paths.setflags(write=False)
        atom_paths.append(paths)
        n_prev *= a
    ps = PathSpace(spec.horizon, spec.dim, parents, noise, cond, spec=spec, atom_paths=atom_paths)
    total = ps.node_probabilities(spec.horizon).sum()
    if abs(total - 1.0) > PROB_TOL:
        raise BadSpec(f"leaf probabilities sum to {total!r}")
    return ps


def sample_paths(spec, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` independent noise paths, shape ``(count, N, d)``.

    ``spec`` is either a :class:`NoiseSpec` (atoms drawn with their
    probabilities) or a :class:`SampledNoise`.  Output depends only on
    ``seed``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    out = np.empty((count, spec.horizon, spec.dim))
    for k in range(spec.horizon):
        if isinstance(spec, NoiseSpec):
            values, probs = spec.steps[k]
            out[:, k, :] = values[rng.choice(len(probs), size=count, p=probs)]
        else:
            draw = np.asarray(spec.sampler(rng, count), dtype=float)
            out[:, k, :] = draw.reshape(count, spec.dim)
    return out


def empirical_path_space(paths: np.ndarray) -> PathSpace:
    """Tree carrying the empirical measure of sampled paths.

    Paths sharing a prefix share the corresponding node; a node's probability
    is the fraction of paths passing through it.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    count, horizon, dim = paths.shape
    flat = paths.reshape(count, horizon * dim)
    order = np.lexsort(flat.T[::-1])
    flat = flat[order]
    sorted_paths = paths[order]
    parents, noise, cond = [], [], []
    prev_ids = np.zeros(count, dtype=np.intp)
    prev_counts = np.array([count])
    for k in range(1, horizon + 1):
        key = flat[:, : k * dim]
        new = np.ones(count, dtype=bool)
        new[1:] = np.any(key[1:] != key[:-1], axis=1)
        ids = np.cumsum(new) - 1
        first = np.flatnonzero(new)
        counts = np.bincount(ids)
        parents.append(prev_ids[first])
        noise.append(sorted_paths[first, k - 1, :])
        cond.append(counts / prev_counts[prev_ids[first]])
        prev_ids, prev_counts = ids, counts
    return PathSpace(horizon, dim, parents, noise, cond)


def expectation(ps: PathSpace, proc: AdaptedProcess, stage: int) -> np.ndarray:
    """``E[proc(stage)]`` as an exact tree sum."""
    return ps.expect(proc[stage], stage)


def conditional_expectation(ps: PathSpace, proc: AdaptedProcess, from_stage: int,
                            to_stage: int) -> AdaptedProcess:
    """``E[proc(from_stage) | F_to_stage]`` as a single-stage adapted process."""
    if to_stage >= from_stage:
        raise StageOutOfRange(f"to_stage ({to_stage}) must precede from_stage ({from_stage})")
    if to_stage < 0:
        raise StageOutOfRange(f"stage {to_stage} is negative")
    return AdaptedProcess(to_stage, [ps.condexp(proc[from_stage], from_stage, to_stage)])
