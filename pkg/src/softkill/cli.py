"""Command line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 a solver
did not converge or left its region of validity.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .analysis.config import ExperimentConfig, config_schema, load_config
from .analysis.probes import regularity_probe
from .analysis.report import FORMATS, Table, emit_report, load_table, render_figure
from .analysis.study import run_convergence_study
from .mean_field import SolverError, duality_value_identity, mfc_picard_solve
from .particles import FieldFeedback, InitialLaw, SimConfig, WeightBoundError, simulate_cost_jn, weight_norm
from .small_n import compare_to_limit, random_samples, solve_v2_reduced

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3

logger = logging.getLogger("softkill")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softkill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON experiment configuration")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--format", choices=FORMATS + ("both",), default="both")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--M", type=int)
        sp.add_argument("--T", type=float)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--dt-sim", dest="dt_sim", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--eps", type=float)
        sp.add_argument("--N", dest="N_list", type=int, nargs="*", help="particle counts")
        sp.add_argument("--replications", type=int)
        sp.add_argument("--no-figures", action="store_true")

    for name, helptext in [
        ("solve-mfc", "solve the limit problem and write the flow and adjoint summaries"),
        ("simulate", "estimate the particle cost under the mean-field feedback"),
        ("small-n", "compare the exact N=2 value with the limit value"),
        ("study", "convergence study over the N sweep"),
        ("probe", "regularity probes of the limit value"),
    ]:
        common(sub.add_parser(name, help=helptext))
    rp = sub.add_parser("report", help="re-render figures from a JSON report")
    rp.add_argument("path", type=Path)
    rp.add_argument("--out", type=Path)
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def _config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "M", "T", "dt", "dt_sim", "k", "eps", "N_list", "replications")}
    if getattr(args, "N_list", None) is not None and not args.N_list:
        raise ValueError("empty N sweep")
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(args.out)
    return load_config(args.config, **overrides)


def _formats(args):
    return FORMATS if args.format == "both" else (args.format,)


def _solve(cfg):
    sol = mfc_picard_solve(cfg.problem(), cfg.initial_density(), **cfg.picard_options())
    if not sol.converged:
        raise SolverError(f"picard did not converge (residual {sol.residual:.3e})")
    return sol


def cmd_solve(cfg, args):
    sol = _solve(cfg)
    spec = sol.spec
    pair_u = sol.mu.pairing(sol.u.values)
    pair_v = sol.mu.pairing(spec.V.values)
    rows = [[float(t), float(m), float(pu), float(pv), float(np.abs(u).max()), float(b)]
            for t, m, pu, pv, u, b in zip(spec.times, sol.mu.masses(), pair_u, pair_v, sol.u.values,
                                          sol.u.apriori_bound)]
    cols = ["t", "mass", "u_mu", "V_mu", "u_sup", "ode_bound"]
    summary = {"value": sol.value, "iterations": sol.iterations, "residual": sol.residual,
               "damping": sol.damping, "duality_defect": duality_value_identity(sol)}
    table = Table("solve_mfc", cols, rows, _meta(cfg), summary)
    return table


def cmd_simulate(cfg, args):
    sol = _solve(cfg)
    fb = FieldFeedback.from_solution(sol)
    rows = []
    for N in cfg.N_list:
        a0 = cfg.clocks(N)
        est = simulate_cost_jn(sol.spec, InitialLaw(cfg.initial_density(), N, a0), fb,
                               SimConfig(cfg.dt_sim, cfg.replications, cfg.seed + N))
        rows.append([N, est.mean, est.se, est.replications, sol.value, est.mean - sol.value,
                     float(weight_norm(a0))])
    cols = ["N", "J", "se", "replications", "value", "signed_gap", "rhs"]
    return Table("simulate", cols, rows, _meta(cfg), {"value": sol.value})


def cmd_small_n(cfg, args):
    spec = cfg.problem()
    delta_max = cfg.delta0 + (spec.T - spec.t0) * float(np.ptp(spec.V.values))
    table = solve_v2_reduced(spec, delta_max=delta_max, M_delta=cfg.M_delta, keep=[spec.t0])
    samples = random_samples(spec, cfg.exact_samples, cfg.seed, cfg.M, table.delta, cfg.delta0)
    return compare_to_limit(spec, samples, table=table, eps=cfg.eps, **cfg.picard_options())


def _meta(cfg) -> dict:
    d = cfg.model_dump(mode="json")
    return {k: d[k] for k in ("seed", "d", "M", "dt", "dt_sim", "k", "eps", "T", "t0", "replications")}


COMMANDS = {
    "solve-mfc": cmd_solve,
    "simulate": cmd_simulate,
    "small-n": cmd_small_n,
    "study": lambda cfg, args: run_convergence_study(cfg),
    "probe": lambda cfg, args: regularity_probe(cfg),
}


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        import json

        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK
    if args.command == "report":
        try:
            table = load_table(args.path)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        out = args.out or args.path.parent
        out.mkdir(parents=True, exist_ok=True)
        fig = render_figure(table, out)
        print(fig if fig is not None else "no figure for this report")
        return EXIT_OK
    try:
        cfg = _config(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        report = COMMANDS[args.command](cfg, args)
    except (SolverError, WeightBoundError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        paths = emit_report(report, cfg.output_dir, _formats(args), cfg=_meta(cfg),
                            figures=not args.no_figures)
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in paths:
        print(path)
    return EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
