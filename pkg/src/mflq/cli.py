"""Command-line pipelines: validate, solve-mf, simulate, converge, oracle-compare.

Every command loads a JSON model config, runs one pipeline, writes CSV
data files plus a JSON manifest into ``--out``, and returns a documented
exit code: 0 ok, 2 standing-assumption violation, 3 config parse error,
4 decoupling (Riccati) failure, 5 simulation blow-up, 6 oracle bounds
exceeded.  Emitted CSVs are byte-stable functions of (config, flags,
seed); the worker-thread count (``MFLQ_THREADS``) never changes them.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, assembly, meanfield, model, numkit, oracle, population, riccati

__all__ = ["main"]

EXIT_OK = 0
EXIT_ASSUMPTION = 2
EXIT_PARSE = 3
EXIT_RICCATI = 4
EXIT_SIMULATION = 5
EXIT_ORACLE = 6

_RICCATI_FAILURES = (
    riccati.DeterminantConditionError,
    riccati.SpecialCaseError,
    numkit.SingularMatrixError,
    numkit.NonFiniteError,
    meanfield.ConsistencyError,
    population.StrategyError,
)


def _config_hash(spec) -> str:
    return hashlib.sha256(model.canonical_json(spec).encode("utf-8")).hexdigest()


def _write_manifest(out_dir, command, spec, *, seed=None, paths=None,
                    n_sweep=None, outputs=(), extra=None):
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "config_sha256": _config_hash(spec),
        "grid": {"T": spec.grid.T, "steps": spec.grid.steps},
        "seed": seed,
        "paths": paths,
        "N_sweep": list(n_sweep) if n_sweep is not None else None,
        "outputs": sorted(outputs),
        "wall_clock_s": None,  # filled below so the key order stays fixed
    }
    if extra:
        manifest["results"] = extra
    manifest["wall_clock_s"] = round(time.time() - _START, 3)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


_START = time.time()


def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _validated(spec):
    """Exit-worthy report when the standing assumptions fail."""
    report = model.validate(spec)
    for line in report.lines():
        print(line)
    return report.ok


def _spec_for_N(spec, n_agents, allow_eps):
    if n_agents is None:
        return spec
    pop = model.population_for_N(spec, int(n_agents), allow_eps=allow_eps)
    return replace(spec, population=pop, dims=replace(spec.dims, N=int(n_agents)))


def _solve_profile(spec, method):
    mf = meanfield.solve_consistency(spec, method=method)
    return mf


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args):
    spec = model.load_config(args.config)
    return EXIT_OK if _validated(spec) else EXIT_ASSUMPTION


def cmd_solve_mf(args):
    spec = model.load_config(args.config)
    if not _validated(spec):
        return EXIT_ASSUMPTION
    out = _prepare_out(args)
    mf = _solve_profile(spec, args.riccati_method)
    residual = meanfield.fixed_point_residual(spec, mf, method=args.riccati_method)

    mf_csv = os.path.join(out, "meanfield.csv")
    meanfield.dump_profile_csv(mf, mf_csv)

    cc = assembly.assemble_cc(spec)
    rsol = riccati.solve(cc, spec.grid, method=args.riccati_method or "direct")
    ric_csv = os.path.join(out, "riccati.csv")
    with open(ric_csv, "w", newline="") as fh:
        fh.write("node,t,pivot_margin\n")
        for m, margin in enumerate(rsol.pivot_margins):
            fh.write("%d,%.17g,%.17g\n" % (m, m * spec.grid.dt, margin))

    deviation = None
    if cc.constant_dynamics:
        try:
            other = riccati.solve_exponential(cc, spec.grid)
            deviation = float(np.max(np.abs(rsol.phi.values - other.phi.values)))
        except riccati.SpecialCaseError:
            deviation = None

    extra = {
        "fixed_point_residual": residual,
        "boundary_residual": mf.boundary_residual,
        "riccati_method": mf.riccati_method,
        "riccati_terminal_check": rsol.terminal_check,
        "riccati_cross_method_deviation": deviation,
    }
    print("fixed_point_residual = %.6g" % residual)
    print("riccati method %s, terminal check %.3g" % (rsol.method, rsol.terminal_check))
    if deviation is not None:
        print("cross-method deviation = %.6g" % deviation)
    manifest = _write_manifest(out, "solve-mf", spec,
                               outputs=[os.path.basename(p) for p in (mf_csv, ric_csv)],
                               extra=extra)
    print("wrote %s, %s, %s" % (mf_csv, ric_csv, manifest))
    return EXIT_OK


def cmd_simulate(args):
    spec = model.load_config(args.config)
    if not _validated(spec):
        return EXIT_ASSUMPTION
    spec = _spec_for_N(spec, args.N, args.allow_epsN)
    out = _prepare_out(args)
    mf = _solve_profile(spec, args.riccati_method)
    strategy = population.synthesize(spec, mf, method=args.riccati_method)
    run = population.simulate_population(spec, strategy, args.paths, args.seed)
    cost = population.social_cost(run, spec)
    err = population.meanfield_error(run, mf)

    cost_csv = os.path.join(out, "cost.csv")
    population.dump_cost_csv([(run, cost)], cost_csv)
    traj_csv = os.path.join(out, "trajectory.csv")
    population.dump_agent_csv(run, args.agent, traj_csv)

    extra = {
        "J_soc": cost.j_soc,
        "J_soc_per_agent": cost.j_soc / spec.dims.N,
        "stderr": cost.stderr,
        "meanfield_error": err.value,
        "meanfield_error_stderr": err.stderr,
    }
    print("N=%d paths=%d seed=%d: J_soc=%.10g (stderr %.3g), meanfield_error=%.6g"
          % (spec.dims.N, args.paths, args.seed, cost.j_soc, cost.stderr, err.value))
    manifest = _write_manifest(
        out, "simulate", spec, seed=args.seed, paths=args.paths,
        n_sweep=[spec.dims.N],
        outputs=[os.path.basename(p) for p in (cost_csv, traj_csv)], extra=extra)
    print("wrote %s, %s, %s" % (cost_csv, traj_csv, manifest))
    return EXIT_OK


def _parse_n_list(text):
    try:
        values = [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise model.ConfigError("bad N list %r" % text) from None
    if not values or any(v < 1 for v in values):
        raise model.ConfigError("bad N list %r" % text)
    return values


def _is_deterministic(spec):
    return all(tp.sigma.is_zero for tp in spec.types) and spec.shared.D.is_zero


def cmd_converge(args):
    spec = model.load_config(args.config)
    if not _validated(spec):
        return EXIT_ASSUMPTION
    out = _prepare_out(args)
    n_values = _parse_n_list(args.N_list)
    mf = _solve_profile(spec, args.riccati_method)

    rows = []
    cost_rows = []
    for n_agents in n_values:
        spec_n = _spec_for_N(spec, n_agents, args.allow_epsN)
        strategy = population.synthesize(spec_n, mf, method=args.riccati_method)
        run = population.simulate_population(spec_n, strategy, args.paths, args.seed)
        cost = population.social_cost(run, spec_n)
        err = population.meanfield_error(run, mf)
        gap = population.optimality_gap(spec_n, strategy, paths=args.paths,
                                        seed=args.seed)
        rows.append((n_agents, err.value, err.stderr, gap.max_abs))
        cost_rows.append((run, cost))
        print("N=%4d meanfield_error=%.6g (stderr %.3g) max_gap=%.6g"
              % (n_agents, err.value, err.stderr, gap.max_abs))

    rate_csv = os.path.join(out, "rate.csv")
    population.dump_rate_csv(rows, rate_csv)
    cost_csv = os.path.join(out, "cost.csv")
    population.dump_cost_csv(cost_rows, cost_csv)

    logn = np.log([r[0] for r in rows])
    err_slope = float(np.polyfit(logn, np.log([r[1] for r in rows]), 1)[0]) \
        if len(rows) > 1 and all(r[1] > 0 for r in rows) else None
    gap_slope = float(np.polyfit(logn, np.log([r[3] for r in rows]), 1)[0]) \
        if len(rows) > 1 and all(r[3] > 0 for r in rows) else None
    floor = _is_deterministic(spec)
    tag = " [floor: deterministic paths, discretization error only]" if floor else ""
    print("meanfield_error slope = %s%s" % ("n/a" if err_slope is None else "%.3f" % err_slope, tag))
    print("max_gap slope = %s" % ("n/a" if gap_slope is None else "%.3f" % gap_slope))

    extra = {
        "meanfield_error_slope": err_slope,
        "max_gap_slope": gap_slope,
        "slope_flag": "floor" if floor else "stochastic",
    }
    manifest = _write_manifest(
        out, "converge", spec, seed=args.seed, paths=args.paths, n_sweep=n_values,
        outputs=[os.path.basename(p) for p in (rate_csv, cost_csv)], extra=extra)
    print("wrote %s, %s, %s" % (rate_csv, cost_csv, manifest))
    return EXIT_OK


def cmd_oracle_compare(args):
    spec = model.load_config(args.config)
    if not _validated(spec):
        return EXIT_ASSUMPTION
    out = _prepare_out(args)
    steps = args.tree_steps
    spec_t = replace(spec, grid=model.Grid(T=spec.grid.T, steps=steps))
    tree = oracle.make_tree(spec_t, steps=steps)
    sol = oracle.tree_social_optimum(tree)

    mf = _solve_profile(spec_t, args.riccati_method)
    strategy = population.synthesize(spec_t, mf, method=args.riccati_method)
    run = population.simulate_population(spec_t, strategy, args.paths, args.seed)
    cost = population.social_cost(run, spec_t)

    gap = cost.j_soc - sol.J_star
    per_agent = gap / spec_t.dims.N
    ok = gap >= -3.0 * cost.stderr
    print("tree steps=%d N=%d: J_tree*=%.10g J_sim=%.10g (stderr %.3g)"
          % (steps, spec_t.dims.N, sol.J_star, cost.j_soc, cost.stderr))
    print("gap=%.6g per_agent=%.6g -> %s (tolerance: gap >= -3 stderr)"
          % (gap, per_agent, "PASS" if ok else "FAIL"))

    cmp_csv = os.path.join(out, "oracle.csv")
    with open(cmp_csv, "w", newline="") as fh:
        fh.write("N,tree_steps,paths,seed,J_tree,J_sim,stderr,gap,per_agent_gap\n")
        fh.write("%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                 % (spec_t.dims.N, steps, args.paths, args.seed,
                    sol.J_star, cost.j_soc, cost.stderr, gap, per_agent))
    extra = {
        "J_tree": sol.J_star,
        "J_sim": cost.j_soc,
        "gap": gap,
        "per_agent_gap": per_agent,
        "verdict": "PASS" if ok else "FAIL",
    }
    manifest = _write_manifest(
        out, "oracle-compare", spec_t, seed=args.seed, paths=args.paths,
        n_sweep=[spec_t.dims.N],
        outputs=[os.path.basename(cmp_csv)], extra=extra)
    print("wrote %s, %s" % (cmp_csv, manifest))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(sub, out_required=True):
    sub.add_argument("--config", required=True, help="model config JSON")
    if out_required:
        sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--riccati-method", dest="riccati_method", default=None,
                     choices=["direct", "fundamental", "exponential"],
                     help="force one decoupling construction")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mflq",
        description="Mean-field LQ social optimum pipelines.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="check the standing assumptions")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = subs.add_parser("solve-mf", help="solve the consistency profile")
    _add_common(p)
    p.set_defaults(func=cmd_solve_mf)

    p = subs.add_parser("simulate", help="Monte Carlo sweep of the population")
    _add_common(p)
    p.add_argument("--N", type=int, default=None, help="override population size")
    p.add_argument("--paths", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--agent", type=int, default=1,
                   help="agent number for the trajectory dump")
    p.add_argument("--allow-epsN", dest="allow_epsN", action="store_true",
                   help="allow N that does not split exactly as N*pi")
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("converge", help="error and gap rates over an N sweep")
    _add_common(p)
    p.add_argument("--N-list", dest="N_list", default="10,20,40")
    p.add_argument("--paths", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-epsN", dest="allow_epsN", action="store_true")
    p.set_defaults(func=cmd_converge)

    p = subs.add_parser("oracle-compare",
                        help="simulated rules against the scenario-tree optimum")
    _add_common(p)
    p.add_argument("--tree-steps", dest="tree_steps", type=int, default=4)
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_compare)

    return parser


def main(argv=None):
    global _START
    _START = time.time()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except model.ConfigError as exc:
        # a bad file or N split: parse problems carry a path or line marker
        text = str(exc)
        if "does not split" in text or "leaves some type empty" in text or "bad N list" in text:
            print("error: %s" % text, file=sys.stderr)
            return EXIT_ASSUMPTION
        print("config error: %s" % text, file=sys.stderr)
        return EXIT_PARSE
    except _RICCATI_FAILURES as exc:
        print("decoupling failure: %s" % exc, file=sys.stderr)
        return EXIT_RICCATI
    except population.SimulationError as exc:
        print("simulation failure: %s" % exc, file=sys.stderr)
        return EXIT_SIMULATION
    except (oracle.TreeSizeError, oracle.OracleInputError) as exc:
        print("oracle bounds: %s" % exc, file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
