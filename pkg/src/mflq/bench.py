"""Benchmark the stepping kernels: ``python -m mflq.bench``.

Builds a two-type benchmark instance, synthesizes the rules once, then
times the population sweep under each available kernel and reports the
relative cost difference between them.
"""

import argparse
import sys
import time

import numpy as np

from . import backend, meanfield, model, population

__all__ = ["benchmark_instance", "main"]


def benchmark_instance(nagents, steps):
    half = nagents // 2
    cfg = {
        "dims": {"n": 1, "d": 1, "K": 2, "N": nagents},
        "grid": {"T": 1.0, "steps": steps},
        "types": [
            {"A": [[0.2]], "H": [[0.1]], "R": [[1.0]], "sigma": [0.3],
             "xi0": [1.0], "eta": [0.2]},
            {"A": [[-0.1]], "H": [[0.3]], "R": [[1.2]], "sigma": [0.4],
             "xi0": [-0.5], "eta": [-0.3]},
        ],
        "shared": {
            "B": [[1.0]], "D": [[0.2]], "F": [[0.3]], "Kcoef": [[0.15]],
            "L": [[0.2]], "M": [[0.1]], "Phi": [[0.4]], "Q": [[0.5]],
            "S": [[0.3]], "Gamma": [[0.3]],
        },
        "population": {"counts": [half, nagents - half], "pi": [0.5, 0.5]},
    }
    return model.parse(cfg)


def _time_backend(name, spec, strategy, args):
    import os

    old = os.environ.get(backend.ENV_VAR)
    os.environ[backend.ENV_VAR] = name
    try:
        run = None
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            run = population.simulate_population(
                spec, strategy, args.paths, args.seed,
                keep_paths=0, threads=args.threads,
            )
            best = min(best, time.perf_counter() - t0)
    finally:
        if old is None:
            del os.environ[backend.ENV_VAR]
        else:
            os.environ[backend.ENV_VAR] = old
    return best, run


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="python -m mflq.bench",
        description="Time the population stepping kernels.",
    )
    parser.add_argument("--N", type=int, default=64, help="number of agents")
    parser.add_argument("--steps", type=int, default=50, help="time steps")
    parser.add_argument("--paths", type=int, default=256, help="Monte Carlo paths")
    parser.add_argument("--seed", type=int, default=0, help="noise seed")
    parser.add_argument("--repeat", type=int, default=3,
                        help="timed repetitions; the best one is reported")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: MFLQ_THREADS or 1)")
    args = parser.parse_args(argv)

    spec = benchmark_instance(args.N, args.steps)
    mf = meanfield.solve_consistency(spec)
    strategy = population.synthesize(spec, mf)

    avail = backend.available()
    print("instance: N=%d steps=%d paths=%d seed=%d"
          % (args.N, args.steps, args.paths, args.seed))
    results = {}
    for name in ("py", "c"):
        if not avail[name]:
            print("%-3s not built" % name)
            continue
        best, run = _time_backend(name, spec, strategy, args)
        results[name] = (best, run.j_soc)
        rate = args.paths / best
        print("%-3s %8.3f s   %8.1f paths/s   J_soc=%.12g"
              % (name, best, rate, run.j_soc))
    if len(results) == 2:
        jp, jc = results["py"][1], results["c"][1]
        rel = abs(jp - jc) / max(1.0, abs(jp))
        print("speedup x%.2f   relative cost difference %.3g"
              % (results["py"][0] / results["c"][0], rel))
        if not (np.isfinite(rel) and rel <= 1e-9):
            print("kernel outputs disagree", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
