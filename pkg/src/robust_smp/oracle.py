"""Exhaustive search over grid-valued adapted controls.

A control grid assigns a finite value list to every ``(stage, node,
component)`` slot.  Slots are ordered by stage, then node, then component;
controls are enumerated in mixed-radix order with the last slot varying
fastest, and the index of a control in that order breaks ties.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import costs_batch
from .errors import GridTooLarge, InadmissibleControl, ShapeMismatch
from .model import ScenarioModel
from .path_space import AdaptedProcess, PathSpace
from .robust import AmbiguitySet, _check_sizes, robust_cost

DEFAULT_CAP = 10**7
CHUNK = 4096


class ControlGrid:
    """Value lists for every control slot of a tree.

    ``values[k]`` is a list over nodes of a list over components of 1-d
    arrays.
    """

    def __init__(self, ps: PathSpace, model: ScenarioModel, values, cap: int = DEFAULT_CAP):
        if len(values) != model.horizon:
            raise ShapeMismatch(f"need value lists for {model.horizon} stages")
        self.shapes = [(ps.n_nodes(k), model.control_dim) for k in range(model.horizon)]
        slots = []
        for k, (stage, shape) in enumerate(zip(values, self.shapes)):
            if len(stage) != shape[0] or any(len(node) != shape[1] for node in stage):
                raise ShapeMismatch(f"stage {k}: need {shape[0]} nodes with {shape[1]} components")
            box = model.control_sets[k]
            for node in stage:
                for i, vals in enumerate(node):
                    vals = np.array(vals, dtype=float).ravel()
                    if vals.size == 0:
                        raise ShapeMismatch(f"stage {k}: empty value list")
                    if box is not None and (np.any(vals < box.lo[i]) or np.any(vals > box.hi[i])):
                        raise InadmissibleControl(f"grid value outside U_{k} in component {i}")
                    vals.setflags(write=False)
                    slots.append(vals)
        self.slots = slots
        self.cap = cap

    @classmethod
    def uniform(cls, ps, model, lo, hi, points, cap=DEFAULT_CAP):
        """The same ``linspace(lo, hi, points)`` in every slot of a component."""
        return cls.from_bounds(ps, model, lo, hi, points, cap=cap)

    @classmethod
    def around(cls, ps, model, candidate: AdaptedProcess, radius, points, cap=DEFAULT_CAP):
        """``linspace(c - radius, c + radius, points)`` around each entry ``c`` of ``candidate``."""
        return cls.from_bounds(ps, model, -radius, radius, points, center=candidate, cap=cap)

    @classmethod
    def from_bounds(cls, ps, model, lo, hi, points, center: AdaptedProcess | None = None, cap=DEFAULT_CAP):
        """``linspace(lo, hi, points)`` per slot, shifted by ``center`` when given.

        ``lo`` and ``hi`` broadcast to ``(N, m)``: a scalar, one value per
        component, or one row per stage.
        """
        shape = (model.horizon, model.control_dim)
        lo = np.broadcast_to(np.asarray(lo, dtype=float), shape)
        hi = np.broadcast_to(np.asarray(hi, dtype=float), shape)
        values = []
        for k in range(model.horizon):
            base = np.zeros((ps.n_nodes(k), model.control_dim)) if center is None else center[k]
            values.append([[np.linspace(c + lo[k, i], c + hi[k, i], points) for i, c in enumerate(row)]
                           for row in base])
        return cls(ps, model, values, cap)

    @property
    def sizes(self):
        return [len(v) for v in self.slots]

    @property
    def count(self):
        return math.prod(self.sizes)

    def spacing(self):
        """Largest gap between consecutive values of each slot (0 for single values)."""
        return np.array([np.max(np.diff(np.sort(v)), initial=0.0) for v in self.slots])

    def check_cap(self):
        if self.count > self.cap:
            raise GridTooLarge(f"{self.count} control assignments exceed the cap of {self.cap}")

    def decode(self, indices):
        """Stage arrays of shape ``(len(indices), n_k, m)`` for flat enumeration indices."""
        return self.assemble(np.stack(np.unravel_index(np.asarray(indices), self.sizes), axis=-1))

    def assemble(self, digits):
        """Stage arrays for a ``(batch, slots)`` array of per-slot value indices."""
        flat = np.stack([v[d] for v, d in zip(self.slots, np.asarray(digits).T)], axis=-1)
        out, start = [], 0
        for n, m in self.shapes:
            out.append(flat[:, start:start + n * m].reshape(-1, n, m))
            start += n * m
        return out

    def flatten(self, u: AdaptedProcess):
        return np.concatenate([u[k].ravel() for k in range(len(self.shapes))])


def enumerate_adapted_controls(ps: PathSpace, grid: ControlGrid):
    """Yield every grid control in mixed-radix order, last slot fastest."""
    grid.check_cap()
    for start in range(0, grid.count, CHUNK):
        stages = grid.decode(np.arange(start, min(start + CHUNK, grid.count)))
        for j in range(len(stages[0])):
            yield AdaptedProcess(0, [s[j] for s in stages])


def _chunk_values(ps, model, vertices, grid, start, stop):
    controls = grid.decode(np.arange(start, stop))
    y = np.stack([costs_batch(ps, model, g, controls) for g in range(model.n_scenarios)], axis=-1)
    return np.max(y @ vertices.T, axis=-1)


@dataclass
class OracleResult:
    best_control: AdaptedProcess
    best_value: float
    best_index: int
    evaluated: int


def brute_force_minimum(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet, grid: ControlGrid,
                        threads: int | None = None, chunk: int = CHUNK) -> OracleResult:
    """Exact minimum of the robust cost over all grid controls; ties go to the earliest control."""
    _check_sizes(model, ambiguity)
    grid.check_cap()
    total = grid.count
    bounds = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    threads = threads or os.cpu_count() or 1

    def work(b):
        vals = _chunk_values(ps, model, ambiguity.vertices, grid, *b)
        j = int(np.argmin(vals))
        return b[0] + j, float(vals[j])

    if threads == 1 or len(bounds) == 1:
        results = [work(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, bounds))
    best_index, best_value = results[0]
    for idx, val in results[1:]:
        if val < best_value:
            best_index, best_value = idx, val
    best = AdaptedProcess(0, [s[0] for s in grid.decode([best_index])])
    return OracleResult(best, best_value, best_index, total)


@dataclass
class CertificationReport:
    passed: bool
    candidate_value: float
    grid_value: float
    slack: float
    best_control: AdaptedProcess
    max_spacings_from_best: float

    @property
    def margin(self):
        """``grid_value - candidate_value``; non-negative when the candidate beats every grid point."""
        return self.grid_value - self.candidate_value

    def summary(self):
        verdict = "pass" if self.passed else "fail"
        return (f"certification: {verdict}\n"
                f"candidate_value: {self.candidate_value:.17g}\n"
                f"grid_minimum: {self.grid_value:.17g}\n"
                f"slack: {self.slack:.17g}\n"
                f"grid_minimizer_distance_in_spacings: {self.max_spacings_from_best:.17g}\n")


def certify_candidate(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet, grid: ControlGrid,
                      candidate: AdaptedProcess, slack: float = 1e-6,
                      threads: int | None = None) -> CertificationReport:
    """Pass iff the candidate's robust cost is at most the grid minimum plus ``slack``."""
    value, _ = robust_cost(ps, model, ambiguity, candidate)
    result = brute_force_minimum(ps, model, ambiguity, grid, threads)
    gap = np.abs(grid.flatten(result.best_control) - grid.flatten(candidate))
    spacing = grid.spacing()
    ratio = np.where(spacing > 0, gap / np.where(spacing > 0, spacing, 1.0), np.where(gap > 0, np.inf, 0.0))
    return CertificationReport(value <= result.best_value + slack, value, result.best_value, slack,
                               result.best_control, float(np.max(ratio, initial=0.0)))


def coordinate_descent(ps: PathSpace, model: ScenarioModel, ambiguity: AmbiguitySet, grid: ControlGrid,
                       start=None, sweeps: int = 20):
    """Heuristic: cycle over slots, moving each to its best grid value with the others fixed.

    Returns ``(control, value)``.  Only a local grid optimum is guaranteed;
    unlike :func:`brute_force_minimum` the grid size is not capped.
    """
    _check_sizes(model, ambiguity)
    digits = np.zeros(len(grid.slots), dtype=np.intp) if start is None else np.asarray(start, dtype=np.intp)
    sizes = grid.sizes

    def values(batch_digits):
        controls = grid.assemble(batch_digits)
        y = np.stack([costs_batch(ps, model, g, controls) for g in range(model.n_scenarios)], axis=-1)
        return np.max(y @ ambiguity.vertices.T, axis=-1)

    current = float(values(digits[None, :])[0])
    for _ in range(sweeps):
        improved = False
        for s, size in enumerate(sizes):
            trial = np.repeat(digits[None, :], size, axis=0)
            trial[:, s] = np.arange(size)
            vals = values(trial)
            j = int(np.argmin(vals))
            if vals[j] < current:
                digits, current, improved = trial[j], float(vals[j]), True
        if not improved:
            break
    return AdaptedProcess(0, [a[0] for a in grid.assemble(digits[None, :])]), current
