"""Decentralized social optima for linear-quadratic mean-field teams.

The package solves the consistency-condition system of a mean-field LQ
social-optimum problem driven by forward-backward SDEs, decouples it with a
non-symmetric Riccati equation, synthesizes decentralized per-agent
strategies, and checks asymptotic social optimality by Monte Carlo against
brute-force oracles at desk scale.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    assembly,
    backend,
    bench,
    cli,
    engine,
    meanfield,
    model,
    numkit,
    oracle,
    population,
    riccati,
)

__all__ = [
    "assembly",
    "backend",
    "bench",
    "cli",
    "engine",
    "meanfield",
    "model",
    "numkit",
    "oracle",
    "population",
    "riccati",
    "__version__",
]
