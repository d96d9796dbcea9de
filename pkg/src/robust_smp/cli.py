"""Command-line entry point.

Every command reads one configuration document and writes its artifacts to
the output directory.  Exit status: 0 on success, 1 when a check fails, 2 on
invalid input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import artifacts
from .adjoint import duality_sides, solve_adjoint_recursive
from .config import ScenarioConfig, parse_scenario_file
from .dynamics import check_control, fd_convergence_report, linearize, simulate_state
from .errors import RobustSMPError, TreeTooLarge, UnsupportedFamily
from .investment import closed_form_adjoint, solve_theta_star, stationarity_gap
from .oracle import ControlGrid, certify_candidate
from .path_space import AdaptedProcess, build_path_space, empirical_path_space, sample_paths
from .robust import (active_measure_set, check_sufficiency, find_common_reference_measure, robust_cost,
                     scenario_costs, solve_stationary_control, stationarity_residual)

log = logging.getLogger("robust_smp")

COMMANDS = ("simulate", "smp-check", "invest", "oracle")


class CheckFailed(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="robust-smp", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="scenario configuration document (JSON)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="overrides run.seed")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    parser.add_argument("--max-paths", type=int, default=None,
                        help="sample this many paths when the exact tree exceeds run.max_leaves")
    parser.add_argument("--tol", type=float, help="overrides run.tol")
    return parser


def path_space_for(cfg: ScenarioConfig, seed: int, max_paths=None):
    spec = cfg.noise_spec()
    try:
        return build_path_space(spec, cfg.run["max_leaves"])
    except TreeTooLarge:
        if not max_paths:
            raise
        log.info("exact tree too large; sampling %d paths with seed %d", max_paths, seed)
        return empirical_path_space(sample_paths(spec, max_paths, seed))


def _from_spec(spec, ps, model):
    kind, value = next(iter(spec.items()))
    if kind == "constant":
        return AdaptedProcess.constant(ps, range(model.horizon), value)
    if kind == "stages":
        return AdaptedProcess.deterministic(ps, 0, value)
    return AdaptedProcess(0, [np.asarray(v, dtype=float).reshape(ps.n_nodes(k), model.control_dim)
                              for k, v in enumerate(value)])


def resolve_control(cfg: ScenarioConfig, ps, model, amb):
    spec = cfg.run["control"]
    if spec == "zero":
        u = AdaptedProcess.zeros(ps, range(model.horizon), (model.control_dim,))
    elif spec == "theta_star":
        u = solve_theta_star(ps, cfg.investment_spec(), cfg.run["theta_tol"], cfg.run["value_tol"]).control
    elif spec == "stationary":
        u = solve_stationary_control(ps, model, amb.vertices[0])
    elif "stationary" in spec:
        u = solve_stationary_control(ps, model, spec["stationary"])
    else:
        u = _from_spec(spec, ps, model)
    check_control(ps, model, u)
    return u


def resolve_direction(cfg: ScenarioConfig, ps, model, u_star, seed):
    spec = cfg.run["direction"]
    if spec == "zero":
        return u_star
    if spec == "random":
        rng = np.random.default_rng(seed)
        vals = []
        for k in range(model.horizon):
            v = u_star[k] + rng.standard_normal(u_star[k].shape)
            box = model.control_sets[k]
            vals.append(v if box is None else box.project(v))
        return AdaptedProcess(0, vals)
    u = _from_spec(spec, ps, model)
    check_control(ps, model, u)
    return u


def run_simulate(cfg, ps, model, amb, out, args):
    u = resolve_control(cfg, ps, model, amb)
    costs = scenario_costs(ps, model, u)
    for g, label in enumerate(model.labels):
        traj = simulate_state(ps, model, g, u)
        artifacts.write_csv(os.path.join(out, f"trajectory_{label}.csv"),
                            ["stage", "node_id", "component", "value"], artifacts.process_rows(traj.state))
    artifacts.write_csv(os.path.join(out, "control.csv"), ["stage", "node_id", "component", "value"],
                        artifacts.process_rows(u))
    artifacts.write_csv(os.path.join(out, "costs.csv"), ["scenario", "cost"],
                        [(label, float(c)) for label, c in zip(model.labels, costs)])
    value, vertex = robust_cost(ps, model, amb, u, costs)
    artifacts.write_text(os.path.join(out, "summary.txt"),
                         f"robust_cost: {artifacts.fmt(value)}\nworst_vertex: {vertex}\n")
    return 0


def run_smp_check(cfg, ps, model, amb, out, args):
    run = cfg.run
    tol = run["tol"]
    u_star = resolve_control(cfg, ps, model, amb)
    u = resolve_direction(cfg, ps, model, u_star, run["seed"])
    failures = []
    duality_rows, fd_rows = [], []
    for g, label in enumerate(model.labels):
        lin = linearize(ps, model, g, u_star)
        adj = solve_adjoint_recursive(ps, model, g, u_star, lin)
        lhs, rhs = duality_sides(ps, model, g, u_star, u, lin, adj)
        rel = abs(lhs - rhs) / (1.0 + max(abs(lhs), abs(rhs)))
        duality_rows.append((label, lhs, rhs, abs(lhs - rhs), rel))
        if rel > run["duality_tol"]:
            failures.append(f"duality residual {rel:.3g} in scenario {label}")
        for row in fd_convergence_report(ps, model, g, u_star, u, run["deltas"]):
            fd_rows.append((label, row.delta, row.quotient, row.derivative, row.error))
        artifacts.write_csv(os.path.join(out, f"adjoint_P_{label}.csv"),
                            ["stage", "node_id", "component", "P_value"], artifacts.process_rows(adj.P))
        artifacts.write_csv(os.path.join(out, f"adjoint_Q_{label}.csv"),
                            ["stage", "node_id", "component", "Q_value"], artifacts.process_rows(adj.Q))
    artifacts.write_csv(os.path.join(out, "duality.csv"),
                        ["scenario", "lhs", "rhs", "residual", "relative_residual"], duality_rows)
    artifacts.write_csv(os.path.join(out, "fd.csv"),
                        ["scenario", "delta", "quotient", "derivative", "fd_error"], fd_rows)

    face = active_measure_set(ps, model, amb, u_star, run["active_tol"])
    common = find_common_reference_measure(ps, model, amb, u_star,
                                           lambda_grid_density=run["lambda_grid_density"],
                                           radius=run["radius"], seed=run["seed"],
                                           active_tol=run["active_tol"])
    lam = common.measure.weights
    table = stationarity_residual(ps, model, amb, u_star, lam)
    artifacts.write_csv(os.path.join(out, "stationarity.csv"), ["stage", "node_id", "residual"], table.rows())
    if table.max_residual > tol:
        failures.append(f"stationarity residual {table.max_residual:.3g}")
    if common.certified_inf < -tol:
        failures.append(f"certified infimum {common.certified_inf:.3g}")
    try:
        cert = check_sufficiency(ps, model, amb, u_star, lam, tol, run["assume_convex"], run["active_tol"])
        sufficiency = f"{cert.status} ({cert.convexity})"
    except UnsupportedFamily as exc:
        sufficiency = f"undecided ({exc})"

    rep = common.report
    lines = [
        f"robust_cost: {artifacts.fmt(face.value)}",
        f"active_vertices: {' '.join(str(i) for i in face.vertex_indices)}",
        f"reference_measure: {' '.join(artifacts.fmt(float(w)) for w in lam)}",
        f"certified_inf: {artifacts.fmt(common.certified_inf)}",
        f"measure_search: {rep.method}, {rep.grid_points} grid points at density {rep.grid_density}, "
        f"{rep.direction_count} directions, radius {artifacts.fmt(rep.radius)}",
        f"max_min_on_grid: {artifacts.fmt(rep.sup_inf_on_grid)}",
        f"min_max_on_grid: {artifacts.fmt(rep.inf_sup_on_grid)}",
        f"weak_duality_on_grid: {rep.weak_duality_holds}",
        f"certificate_note: {rep.note}",
        f"max_duality_residual: {artifacts.fmt(max(r[4] for r in duality_rows))}",
        f"max_stationarity_residual: {artifacts.fmt(table.max_residual)}",
        f"sufficiency: {sufficiency}",
        f"status: {'FAIL' if failures else 'PASS'}",
    ] + [f"failure: {f}" for f in failures]
    artifacts.write_text(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    return 1 if failures else 0


def run_invest(cfg, ps, model, amb, out, args):
    if cfg.family != "investment":
        raise RobustSMPError("invest needs model.investment")
    spec = cfg.investment_spec()
    sol = solve_theta_star(ps, spec, cfg.run["theta_tol"], cfg.run["value_tol"])
    P = [closed_form_adjoint(spec, ps, g).P for g in range(2)]
    rows = []
    for k in range(spec.horizon):
        for node in range(ps.n_nodes(k)):
            for i in range(spec.stocks):
                rows.append((k, node, i, float(sol.control[k][node, i]), float(P[0][k][node, 0]),
                             float(P[1][k][node, 0]), sol.theta_star))
    artifacts.write_csv(os.path.join(out, "invest.csv"),
                        ["stage", "node_id", "component", "u_star", "P_1", "P_2", "theta_star"], rows)
    value, _ = robust_cost(ps, model, amb, sol.control)
    gap = stationarity_gap(spec, ps, sol.theta_star, sol.control)
    artifacts.write_text(os.path.join(out, "report.txt"),
                         sol.report() + f"robust_cost_over_ambiguity_set: {artifacts.fmt(value)}\n"
                         f"stationarity_gap: {artifacts.fmt(gap)}\n")
    return 0


def run_oracle(cfg, ps, model, amb, out, args):
    candidate = resolve_control(cfg, ps, model, amb)
    g = cfg.oracle["grid"]
    grid = ControlGrid.from_bounds(ps, model, g["lo"], g["hi"], g["points"],
                                   center=candidate if g["relative"] else None, cap=cfg.oracle["cap"])
    rep = certify_candidate(ps, model, amb, grid, candidate, cfg.oracle["slack"], args.threads)
    artifacts.write_csv(os.path.join(out, "oracle_best.csv"), ["stage", "node_id", "component", "value"],
                        artifacts.process_rows(rep.best_control))
    artifacts.write_text(os.path.join(out, "oracle.txt"),
                         rep.summary() + f"grid_controls: {grid.count}\n")
    return 0 if rep.passed else 1


HANDLERS = {"simulate": run_simulate, "smp-check": run_smp_check, "invest": run_invest, "oracle": run_oracle}


def run_command(command, cfg: ScenarioConfig, out_dir, args=None):
    """Execute ``command`` and return its exit code; input errors propagate."""
    args = args or build_parser().parse_args([command, "--config", "-", "--out", out_dir])
    if args.seed is not None:
        cfg.run["seed"] = args.seed
    if args.tol is not None:
        cfg.run["tol"] = args.tol
    ps = path_space_for(cfg, cfg.run["seed"], args.max_paths)
    model = cfg.build_model()
    amb = cfg.ambiguity_set()
    os.makedirs(out_dir, exist_ok=True)
    return HANDLERS[command](cfg, ps, model, amb, out_dir, args)


def main(argv=None):
    level = os.environ.get("ROBUST_SMP_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_scenario_file(args.config)
        code = run_command(args.command, cfg, args.out, args)
    except (RobustSMPError, OSError, ValueError, IndexError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if code:
        print(f"{args.command}: check failed; see {args.out}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
