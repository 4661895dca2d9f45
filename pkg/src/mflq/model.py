"""Problem definition: coefficients, population, horizon, validation.

A :class:`ModelSpec` is the single source of truth for one problem
instance.  It is built from a JSON-compatible dict (see :func:`parse`)
with top-level keys ``dims``, ``types``, ``shared``, ``population`` and
``grid``.  Matrices are row-major nested lists; a time-varying coefficient
is a list of such matrices with one entry per grid cell, interpreted as
piecewise constant from the left endpoint.

Validation mirrors the standing assumptions of the control problem: the
limit type distribution has strictly positive weights, R is symmetric and
uniformly positive definite, Q and Gamma are symmetric positive
semidefinite, and every coefficient is finite on the whole grid.
Violations are reported, never thrown.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .numkit import MatFn

__all__ = [
    "ConfigError",
    "HorizonError",
    "Dims",
    "TypeParams",
    "SharedParams",
    "Population",
    "Grid",
    "ModelSpec",
    "Violation",
    "ValidationReport",
    "parse",
    "emit",
    "canonical_json",
    "load_config",
    "validate",
    "coeff_at",
    "population_for_N",
]

_TYPED_COEFFS = ("A", "H", "R", "sigma")
_SHARED_COEFFS = ("B", "D", "F", "Kcoef", "L", "M", "Q", "S")
_CONST_COEFFS = ("Phi", "Gamma")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration input."""


class HorizonError(ConfigError):
    """A coefficient was requested outside [0, T]."""


@dataclass(frozen=True)
class Grid:
    T: float
    steps: int

    @property
    def dt(self) -> float:
        return self.T / self.steps


@dataclass(frozen=True)
class Dims:
    n: int
    d: int
    K: int
    N: int


@dataclass
class TypeParams:
    """Coefficients owned by one agent type."""

    A: MatFn
    H: MatFn
    R: MatFn
    sigma: MatFn
    xi0: np.ndarray
    eta: np.ndarray


@dataclass
class SharedParams:
    """Coefficients shared by all agent types."""

    B: MatFn
    D: MatFn
    F: MatFn
    Kcoef: MatFn
    L: MatFn
    M: MatFn
    Q: MatFn
    S: MatFn
    Phi: np.ndarray
    Gamma: np.ndarray


@dataclass
class Population:
    """Type assignment and (limit) type distribution.

    ``theta`` holds 0-based type indices internally; the JSON form uses
    1-based labels.  ``pi_N`` is the empirical distribution implied by
    ``theta``; ``pi`` the limit distribution (defaults to ``pi_N``).
    """

    theta: np.ndarray
    pi: np.ndarray

    @property
    def K(self) -> int:
        return len(self.pi)

    @property
    def N(self) -> int:
        return len(self.theta)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.theta, minlength=self.K)

    @property
    def pi_N(self) -> np.ndarray:
        return self.counts / float(self.N)

    @property
    def eps_N(self) -> float:
        return float(np.max(np.abs(self.pi_N - self.pi)))


@dataclass
class ModelSpec:
    dims: Dims
    types: list  # K TypeParams
    shared: SharedParams
    population: Population
    grid: Grid
    raw: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# parsing / emitting
# ---------------------------------------------------------------------------

def _as_matrix(value, rows, cols, where):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != (rows, cols):
        raise ConfigError("%s: expected %dx%d matrix, got shape %r" % (where, rows, cols, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise ConfigError("%s: non-finite entries" % where)
    return arr


def _as_vector(value, n, where):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (n,):
        raise ConfigError("%s: expected length-%d vector, got shape %r" % (where, n, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise ConfigError("%s: non-finite entries" % where)
    return arr


def _depth(value):
    d = 0
    while isinstance(value, (list, tuple)) and value:
        d += 1
        value = value[0]
    return d


def _matfn(value, rows, cols, grid, where):
    """Constant matrix (depth <= 2) or per-cell table (depth 3)."""
    if _depth(value) >= 3:
        if len(value) != grid.steps:
            raise ConfigError(
                "%s: time-varying coefficient needs %d entries (one per grid cell), got %d"
                % (where, grid.steps, len(value))
            )
        table = np.stack([_as_matrix(v, rows, cols, "%s[%d]" % (where, i)) for i, v in enumerate(value)])
        return MatFn(table=table, grid=grid)
    return MatFn(constant=_as_matrix(value, rows, cols, where))


def _vecfn(value, n, grid, where):
    """Constant vector (depth 1) or per-cell table (depth 2)."""
    if _depth(value) >= 2:
        if len(value) != grid.steps:
            raise ConfigError(
                "%s: time-varying coefficient needs %d entries (one per grid cell), got %d"
                % (where, grid.steps, len(value))
            )
        table = np.stack([_as_vector(v, n, "%s[%d]" % (where, i)) for i, v in enumerate(value)])
        return MatFn(table=table, grid=grid)
    return MatFn(constant=_as_vector(value, n, where))


def parse(obj: dict) -> ModelSpec:
    """Build a ModelSpec from a JSON-compatible dict.

    Raises :class:`ConfigError` naming the offending field on any
    structural problem.  Assumption-level checks (definiteness etc.) are
    deferred to :func:`validate`.
    """
    if not isinstance(obj, dict):
        raise ConfigError("top level must be an object")
    for key in ("dims", "types", "shared", "population", "grid"):
        if key not in obj:
            raise ConfigError("missing top-level key %r" % key)

    gsrc = obj["grid"]
    try:
        grid = Grid(T=float(gsrc["T"]), steps=int(gsrc["steps"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("grid: %s" % exc) from None
    if grid.T <= 0 or grid.steps < 1:
        raise ConfigError("grid: need T > 0 and steps >= 1")

    dsrc = obj["dims"]
    try:
        dims = Dims(n=int(dsrc["n"]), d=int(dsrc["d"]), K=int(dsrc["K"]), N=int(dsrc["N"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("dims: %s" % exc) from None
    n, d = dims.n, dims.d

    tsrc = obj["types"]
    if not isinstance(tsrc, list) or len(tsrc) != dims.K:
        raise ConfigError("types: expected a list of %d entries" % dims.K)
    types = []
    for k, entry in enumerate(tsrc):
        where = "types[%d]" % k
        try:
            types.append(
                TypeParams(
                    A=_matfn(entry["A"], n, n, grid, where + ".A"),
                    H=_matfn(entry["H"], n, n, grid, where + ".H"),
                    R=_matfn(entry["R"], d, d, grid, where + ".R"),
                    sigma=_vecfn(entry["sigma"], n, grid, where + ".sigma"),
                    xi0=_as_vector(entry["xi0"], n, where + ".xi0"),
                    eta=_as_vector(entry["eta"], n, where + ".eta"),
                )
            )
        except KeyError as exc:
            raise ConfigError("%s: missing %s" % (where, exc)) from None

    ssrc = obj["shared"]
    try:
        shared = SharedParams(
            B=_matfn(ssrc["B"], n, d, grid, "shared.B"),
            D=_matfn(ssrc["D"], n, d, grid, "shared.D"),
            F=_matfn(ssrc["F"], n, n, grid, "shared.F"),
            Kcoef=_matfn(ssrc["Kcoef"], n, d, grid, "shared.Kcoef"),
            L=_matfn(ssrc["L"], n, n, grid, "shared.L"),
            M=_matfn(ssrc["M"], n, n, grid, "shared.M"),
            Q=_matfn(ssrc["Q"], n, n, grid, "shared.Q"),
            S=_matfn(ssrc["S"], n, n, grid, "shared.S"),
            Phi=_as_matrix(ssrc["Phi"], n, n, "shared.Phi"),
            Gamma=_as_matrix(ssrc["Gamma"], n, n, "shared.Gamma"),
        )
    except KeyError as exc:
        raise ConfigError("shared: missing %s" % exc) from None

    psrc = obj["population"]
    if "theta" in psrc:
        theta_1based = np.asarray(psrc["theta"], dtype=int)
        if theta_1based.shape != (dims.N,):
            raise ConfigError("population.theta: expected %d entries" % dims.N)
        if theta_1based.min() < 1 or theta_1based.max() > dims.K:
            raise ConfigError("population.theta: type labels must lie in 1..%d" % dims.K)
        theta = theta_1based - 1
    elif "counts" in psrc:
        counts = np.asarray(psrc["counts"], dtype=int)
        if counts.shape != (dims.K,) or counts.min() < 0:
            raise ConfigError("population.counts: expected %d nonnegative entries" % dims.K)
        if counts.sum() != dims.N:
            raise ConfigError("population.counts: sum %d != N = %d" % (counts.sum(), dims.N))
        theta = np.repeat(np.arange(dims.K), counts)
    else:
        raise ConfigError("population: needs 'theta' or 'counts'")

    if "pi" in psrc:
        pi = _as_vector(psrc["pi"], dims.K, "population.pi")
    else:
        pi = np.bincount(theta, minlength=dims.K) / float(dims.N)
    population = Population(theta=theta, pi=pi)

    return ModelSpec(
        dims=dims,
        types=types,
        shared=shared,
        population=population,
        grid=grid,
        raw=copy.deepcopy(obj),
    )


def _emit_matfn(fn: MatFn):
    if fn.is_constant:
        return fn.constant.tolist()
    return fn.table.tolist()


def emit(spec: ModelSpec) -> dict:
    """Normalized JSON-compatible dict; parse(emit(spec)) == spec field-wise."""
    return {
        "dims": {"n": spec.dims.n, "d": spec.dims.d, "K": spec.dims.K, "N": spec.dims.N},
        "grid": {"T": spec.grid.T, "steps": spec.grid.steps},
        "types": [
            {
                "A": _emit_matfn(tp.A),
                "H": _emit_matfn(tp.H),
                "R": _emit_matfn(tp.R),
                "sigma": _emit_matfn(tp.sigma),
                "xi0": tp.xi0.tolist(),
                "eta": tp.eta.tolist(),
            }
            for tp in spec.types
        ],
        "shared": {
            "B": _emit_matfn(spec.shared.B),
            "D": _emit_matfn(spec.shared.D),
            "F": _emit_matfn(spec.shared.F),
            "Kcoef": _emit_matfn(spec.shared.Kcoef),
            "L": _emit_matfn(spec.shared.L),
            "M": _emit_matfn(spec.shared.M),
            "Q": _emit_matfn(spec.shared.Q),
            "S": _emit_matfn(spec.shared.S),
            "Phi": spec.shared.Phi.tolist(),
            "Gamma": spec.shared.Gamma.tolist(),
        },
        "population": {
            "theta": (spec.population.theta + 1).tolist(),
            "pi": spec.population.pi.tolist(),
        },
    }


def canonical_json(spec: ModelSpec) -> str:
    """Stable serialized form used for hashing and manifests."""
    return json.dumps(emit(spec), sort_keys=True, separators=(",", ":"))


def load_config(path) -> ModelSpec:
    """Read and parse a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError("%s: line %d column %d: %s" % (path, exc.lineno, exc.colno, exc.msg)) from None
    return parse(obj)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    code: str
    message: str
    where: str = ""


@dataclass
class ValidationReport:
    ok: bool
    violations: list
    eps_N: float

    def lines(self):
        out = ["validation: %s (eps_N = %.6g)" % ("pass" if self.ok else "FAIL", self.eps_N)]
        for v in self.violations:
            out.append("  [%s] %s%s" % (v.code, v.message, " (%s)" % v.where if v.where else ""))
        return out


def _is_symmetric(m, tol=1e-10):
    return np.linalg.norm(m - m.T, 1) <= tol * (1.0 + np.linalg.norm(m, 1))


def _cell_times(grid: Grid):
    return [m * grid.dt for m in range(grid.steps)] + [grid.T]


def validate(spec: ModelSpec) -> ValidationReport:
    """Check the standing assumptions; returns a report, never raises."""
    bad = []

    dims, pop, grid = spec.dims, spec.population, spec.grid
    if not (dims.n >= 1 and dims.d >= 1 and dims.K >= 1 and dims.N >= dims.K):
        bad.append(Violation("dims", "need n,d,K >= 1 and N >= K", "dims"))
    if grid.steps < 2:
        bad.append(Violation("grid", "need steps >= 2", "grid"))

    counts = pop.counts
    if np.any(counts == 0):
        empty = int(np.argmin(counts)) + 1
        bad.append(Violation("population", "type %d has no agents" % empty, "population.theta"))
    if abs(pop.pi.sum() - 1.0) > 1e-9:
        bad.append(Violation("pi_simplex", "pi sums to %.12g, not 1" % pop.pi.sum(), "population.pi"))
    if pop.pi.min() <= 0.0:
        bad.append(
            Violation(
                "pi_positive",
                "limit distribution must be strictly positive (min pi = %.3g)" % pop.pi.min(),
                "population.pi",
            )
        )

    times = _cell_times(grid)
    for k, tp in enumerate(spec.types):
        for t in times:
            r = tp.R.at(t)
            if not _is_symmetric(r):
                bad.append(Violation("R_symmetric", "R not symmetric", "types[%d].R at t=%.6g" % (k, t)))
                break
            lam = np.linalg.eigvalsh((r + r.T) / 2.0).min()
            if lam <= 1e-10:
                bad.append(
                    Violation(
                        "R_not_pd",
                        "R not uniformly positive definite (min eigenvalue %.3g)" % lam,
                        "types[%d].R at t=%.6g" % (k, t),
                    )
                )
                break
    for t in times:
        q = spec.shared.Q.at(t)
        if not _is_symmetric(q):
            bad.append(Violation("Q_symmetric", "Q not symmetric", "shared.Q at t=%.6g" % t))
            break
        if np.linalg.eigvalsh((q + q.T) / 2.0).min() < -1e-10:
            bad.append(
                Violation("Q_not_psd", "Q not positive semidefinite", "shared.Q at t=%.6g" % t)
            )
            break
    gam = spec.shared.Gamma
    if not _is_symmetric(gam):
        bad.append(Violation("Gamma_symmetric", "Gamma not symmetric", "shared.Gamma"))
    elif np.linalg.eigvalsh((gam + gam.T) / 2.0).min() < -1e-10:
        bad.append(Violation("Gamma_not_psd", "Gamma not positive semidefinite", "shared.Gamma"))

    # boundedness: every coefficient finite on the grid (parse already
    # enforces this for stored data; re-check callables defensively)
    named = [("types[%d].%s" % (k, nm), getattr(tp, nm)) for k, tp in enumerate(spec.types) for nm in _TYPED_COEFFS]
    named += [("shared.%s" % nm, getattr(spec.shared, nm)) for nm in _SHARED_COEFFS]
    for where, fn in named:
        for t in times:
            if not np.all(np.isfinite(fn.at(t))):
                bad.append(Violation("finite", "non-finite coefficient value", "%s at t=%.6g" % (where, t)))
                break

    return ValidationReport(ok=not bad, violations=bad, eps_N=pop.eps_N)


# ---------------------------------------------------------------------------
# coefficient access
# ---------------------------------------------------------------------------

def coeff_at(spec: ModelSpec, which: str, t: float, ktype: int | None = None) -> np.ndarray:
    """Coefficient value at time ``t`` (left-endpoint cell for tables).

    ``ktype`` is the 1-based type index, required for per-type coefficients
    (A, H, R, sigma).  Raises :class:`HorizonError` outside [0, T] and
    :class:`ConfigError` for unknown names.
    """
    tol = 1e-12 * max(1.0, spec.grid.T)
    if t < -tol or t > spec.grid.T + tol:
        raise HorizonError("t = %r outside horizon [0, %r]" % (t, spec.grid.T))
    t = min(max(t, 0.0), spec.grid.T)
    if which in _TYPED_COEFFS:
        if ktype is None:
            raise ConfigError("coefficient %r is per-type; pass ktype in 1..%d" % (which, spec.dims.K))
        if not (1 <= ktype <= spec.dims.K):
            raise ConfigError("ktype %r outside 1..%d" % (ktype, spec.dims.K))
        return getattr(spec.types[ktype - 1], which).at(t)
    if which in _SHARED_COEFFS:
        return getattr(spec.shared, which).at(t)
    if which in _CONST_COEFFS:
        return getattr(spec.shared, which)
    raise ConfigError("unknown coefficient %r" % which)


def population_for_N(spec: ModelSpec, N: int, allow_eps: bool = False) -> Population:
    """Population of size N with the same limit distribution.

    Requires ``N * pi`` to be integral so the empirical distribution stays
    exactly ``pi`` (eps_N = 0); with ``allow_eps`` the counts are rounded by
    largest remainders instead.
    """
    pi = spec.population.pi
    ideal = pi * N
    counts = np.floor(ideal + 1e-9).astype(int)
    if counts.sum() != N:
        if not allow_eps:
            raise ConfigError(
                "N = %d does not split as N*pi with pi = %s; pass allow_eps to round" % (N, pi.tolist())
            )
        rem = ideal - counts
        for idx in np.argsort(-rem)[: N - counts.sum()]:
            counts[idx] += 1
    elif not allow_eps and np.max(np.abs(counts - ideal)) > 1e-6:
        raise ConfigError(
            "N = %d does not split as N*pi with pi = %s; pass allow_eps to round" % (N, pi.tolist())
        )
    if counts.min() < 1:
        raise ConfigError("N = %d leaves some type empty" % N)
    theta = np.repeat(np.arange(spec.dims.K), counts)
    return Population(theta=theta, pi=pi.copy())
