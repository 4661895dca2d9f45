"""Decentralized strategies and Monte Carlo study of the coupled population.

``synthesize`` turns the consistency profile into one auxiliary
decoupling per agent type and extracts from it a control rule that each
agent evaluates from its own simulated states.  ``simulate_population``
runs the real N-agent forward system under those rules: per path it
steps the transformed auxiliary stack that feeds the rule, the auxiliary
state coupled through the deterministic consistency average, and the
real state coupled through the empirical average of all agents on that
path.  Per-path cost integrals, the functional whose path average
estimates the backward value at time zero, and the empirical average
trajectory are aggregated for ``social_cost``, ``meanfield_error`` and
``optimality_gap``.

Determinism rules: every path draws from its own counter-keyed
generator, reductions happen in a canonical order (agents sorted within
each type), and the worker-thread count never changes any byte of the
results.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from math import sqrt
from typing import NamedTuple

import numpy as np

from . import assembly, backend, engine, meanfield, numkit
from .model import Dims, Grid

__all__ = [
    "PopulationInputError",
    "SimulationError",
    "StrategyError",
    "TypeStrategy",
    "StrategyField",
    "KeptPaths",
    "PopulationRun",
    "SocialCost",
    "MCEstimate",
    "GapReport",
    "RandomInit",
    "synthesize",
    "simulate_population",
    "social_cost",
    "meanfield_error",
    "build_directions",
    "optimality_gap",
    "dump_cost_csv",
    "dump_rate_csv",
    "dump_agent_csv",
]

MAX_CHUNK_STATES = 8192
THREADS_ENV = "MFLQ_THREADS"


class PopulationInputError(ValueError):
    """Arguments that do not fit the run (shapes, grids, unknown agents)."""


class SimulationError(ArithmeticError):
    """A simulated state or control left the finite range."""


class StrategyError(ArithmeticError):
    """Synthesized control tables are not finite."""


# ---------------------------------------------------------------------------
# strategy synthesis


@dataclass
class TypeStrategy:
    """Everything one agent type needs to act and to be costed.

    ``node_tables`` holds the stepping coefficients of the transformed
    auxiliary stack at the coarse nodes; ``ugain``/``uoffset`` map that
    stack to the control; ``wkernel[m]`` is the product of implicit
    one-step backward factors used to weight the time-zero backward
    value functional.
    """

    ktype: int
    blocks: assembly.AgentBlocks
    decoupling: object
    offset: engine.OffsetSolution
    node_tables: dict
    ugain: np.ndarray
    uoffset: np.ndarray
    wkernel: np.ndarray


@dataclass
class StrategyField:
    """Per-type decentralized control rules on a common grid."""

    grid: Grid
    dims: Dims
    per_type: list
    gamma_is_zero: bool

    def type_strategy(self, ktype: int) -> TypeStrategy:
        if not 1 <= ktype <= len(self.per_type):
            raise PopulationInputError("unknown type %r" % (ktype,))
        return self.per_type[ktype - 1]

    def control(self, ktype: int, node: int, xtilde) -> np.ndarray:
        """Control of a type-``ktype`` agent at a coarse node.

        ``xtilde`` is the transformed auxiliary stack (dimension 2n); the
        rule is affine in it.
        """
        ts = self.type_strategy(ktype)
        return ts.ugain[node] @ np.asarray(xtilde, dtype=float) + ts.uoffset[node]

    def feedback_form(self, ktype: int):
        """Own-state feedback tables ``(gains, offsets)`` at the coarse nodes.

        Only valid without the initial-coupling weight: then the
        transformed stack is the state shifted by its start value and its
        lower half stays at zero, so the rule collapses to
        ``u = gains[m] X_i + offsets[m]``.
        """
        if not self.gamma_is_zero:
            raise PopulationInputError(
                "feedback form requires a zero initial-coupling weight"
            )
        ts = self.type_strategy(ktype)
        n = self.dims.n
        xi0 = ts.blocks.system.XiHat[:n]
        gains = np.ascontiguousarray(ts.ugain[:, :, :n])
        offsets = ts.uoffset - gains @ xi0
        return gains, offsets


def _control_tables(spec, ktype, tb, ts):
    """Affine control maps at the coarse nodes from the stepping tables."""
    n, d = spec.dims.n, spec.dims.d
    tp = spec.types[ktype - 1]
    nodes = len(ts)
    ugain = np.empty((nodes, d, 2 * n))
    uoffset = np.empty((nodes, d))
    eye_d = np.eye(d)
    for m, t in enumerate(ts):
        rinv, _ = numkit.solve_linear(
            tp.R.at(t), eye_d, context="control weight of type %d" % ktype
        )
        bt = spec.shared.B.at(t).T
        dmt = spec.shared.D.at(t).T
        kt = spec.shared.Kcoef.at(t).T
        gmat = bt @ tb["phi"][m][n:, :] - dmt @ tb["gain"][m][n:, :] + kt @ tb["xm"][m][n:, :]
        gvec = bt @ tb["psi"][m][n:] - dmt @ tb["off"][m][n:] + kt @ tb["xv"][m][n:]
        ugain[m] = -(rinv @ gmat)
        uoffset[m] = -(rinv @ gvec)
    return ugain, uoffset


def _cost_kernel(spec, ktype, grid):
    """Cumulative implicit backward factors W with W[0] = I.

    One step of the backward value recursion divides by (I - dt H); the
    weight of the step-m running term in the time-zero representation is
    W[m+1], the terminal weight is W[steps].  Matching the implicit
    one-step factors keeps the estimate consistent with the discrete
    backward recursion at the grid level.
    """
    n = spec.dims.n
    tp = spec.types[ktype - 1]
    eye = np.eye(n)
    w = np.empty((grid.steps + 1, n, n))
    w[0] = eye
    for m in range(grid.steps):
        t = m * grid.dt
        step, _ = numkit.solve_linear(
            eye - grid.dt * tp.H.at(t),
            eye,
            context="backward cost kernel of type %d" % ktype,
        )
        w[m + 1] = w[m] @ step
    return w


def synthesize(spec, mf, method=None) -> StrategyField:
    """Build the decentralized control rules from the consistency profile.

    Per type: assemble the auxiliary two-point system, solve its
    decoupling (``method`` forces a named construction), solve the offset
    with the profile's affine inputs, and tabulate the stepping and
    control coefficients at the coarse nodes.
    """
    grid = spec.grid
    per_type = []
    for k in range(1, spec.dims.K + 1):
        blocks = assembly.assemble_agent(spec, k, mf)
        cc = blocks.system
        rsol = meanfield._solve_riccati(cc, grid, method=method)
        osol = engine.solve_offset(cc, rsol, affine=blocks.affine, grid=grid)
        ts, tb = engine._node_tables(
            cc, engine._phi_fn(rsol), engine._psi_fn(osol), blocks.affine, grid
        )
        ugain, uoffset = _control_tables(spec, k, tb, ts)
        if not (np.all(np.isfinite(ugain)) and np.all(np.isfinite(uoffset))):
            raise StrategyError("control tables of type %d are not finite" % k)
        per_type.append(
            TypeStrategy(
                ktype=k,
                blocks=blocks,
                decoupling=rsol,
                offset=osol,
                node_tables=tb,
                ugain=ugain,
                uoffset=uoffset,
                wkernel=_cost_kernel(spec, k, grid),
            )
        )
    gamma_is_zero = not np.any(spec.shared.Gamma)
    return StrategyField(
        grid=grid, dims=spec.dims, per_type=per_type, gamma_is_zero=gamma_is_zero
    )


# ---------------------------------------------------------------------------
# simulation tables


def _type_groups(theta, ntypes):
    """Per-type agent selectors in original order; contiguous runs as slices."""
    groups = []
    for k in range(ntypes):
        idx = np.flatnonzero(theta == k)
        if idx.size and idx[-1] - idx[0] + 1 == idx.size:
            groups.append(slice(int(idx[0]), int(idx[-1]) + 1))
        else:
            groups.append(idx)
    return groups


def _group_size(sel):
    if isinstance(sel, slice):
        return sel.stop - sel.start
    return sel.size


@dataclass
class _KernelTables:
    """Stacked stepping inputs in the layout the kernels consume."""

    typ: np.ndarray
    drm: np.ndarray
    drv: np.ndarray
    sdm: np.ndarray
    sdv: np.ndarray
    ug: np.ndarray
    uo: np.ndarray
    ar: np.ndarray
    sig: np.ndarray
    breal: np.ndarray
    dreal: np.ndarray
    freal: np.ndarray
    fxhat: np.ndarray
    xi: np.ndarray


@dataclass
class _CostTables:
    """Per-node cost and backward-value coefficients keyed by true type."""

    rtab: np.ndarray
    qtab: np.ndarray
    stab: np.ndarray
    kco: np.ndarray
    lco: np.ndarray
    mco: np.ndarray
    wker: np.ndarray
    phi_term: np.ndarray
    eta: np.ndarray
    gamma: np.ndarray


def _c(a):
    return np.ascontiguousarray(np.asarray(a, dtype=float))


def _kernel_tables(spec, strategy) -> _KernelTables:
    grid = strategy.grid
    steps = grid.steps
    n, d, ntypes, nagents = spec.dims.n, spec.dims.d, spec.dims.K, spec.dims.N
    ts = numkit.grid_times(grid)[:steps]
    drm = _c([pt.node_tables["drm"][:steps] for pt in strategy.per_type])
    drv = _c([pt.node_tables["drv"][:steps] for pt in strategy.per_type])
    sdm = _c([pt.node_tables["sdm"][:steps] for pt in strategy.per_type])
    sdv = _c([pt.node_tables["sdv"][:steps] for pt in strategy.per_type])
    ug = _c([pt.ugain[:steps] for pt in strategy.per_type])
    uo = _c([pt.uoffset[:steps] for pt in strategy.per_type])
    ar = np.empty((ntypes, steps, n, n))
    sig = np.empty((ntypes, steps, n))
    for k in range(ntypes):
        tp = spec.types[k]
        for m, t in enumerate(ts):
            ar[k, m] = tp.A.at(t)
            sig[k, m] = tp.sigma.at(t)
    breal = np.empty((steps, n, d))
    dreal = np.empty((steps, n, d))
    freal = np.empty((steps, n, n))
    fxhat = np.empty((steps, n))
    aff = strategy.per_type[0].blocks.affine
    for m, t in enumerate(ts):
        breal[m] = spec.shared.B.at(t)
        dreal[m] = spec.shared.D.at(t)
        freal[m] = spec.shared.F.at(t)
        fxhat[m] = aff.fx_at(t, 2 * n)[:n]
    theta = np.ascontiguousarray(spec.population.theta, dtype=np.int64)
    xi = np.empty((nagents, n))
    for i in range(nagents):
        xi[i] = spec.types[int(theta[i])].xi0
    return _KernelTables(
        typ=theta, drm=drm, drv=drv, sdm=sdm, sdv=sdv, ug=ug, uo=uo,
        ar=_c(ar), sig=_c(sig), breal=_c(breal), dreal=_c(dreal),
        freal=_c(freal), fxhat=_c(fxhat), xi=_c(xi),
    )


def _cost_tables(spec, strategy) -> _CostTables:
    grid = strategy.grid
    steps = grid.steps
    n, d, ntypes = spec.dims.n, spec.dims.d, spec.dims.K
    ts = numkit.grid_times(grid)[:steps]
    rtab = np.empty((ntypes, steps, d, d))
    for k in range(ntypes):
        for m, t in enumerate(ts):
            rtab[k, m] = spec.types[k].R.at(t)
    qtab = np.empty((steps, n, n))
    stab = np.empty((steps, n, n))
    kco = np.empty((steps, n, d))
    lco = np.empty((steps, n, n))
    mco = np.empty((steps, n, n))
    for m, t in enumerate(ts):
        qtab[m] = spec.shared.Q.at(t)
        stab[m] = spec.shared.S.at(t)
        kco[m] = spec.shared.Kcoef.at(t)
        lco[m] = spec.shared.L.at(t)
        mco[m] = spec.shared.M.at(t)
    wker = _c([pt.wkernel for pt in strategy.per_type])
    eta = _c([spec.types[k].eta for k in range(ntypes)])
    return _CostTables(
        rtab=_c(rtab), qtab=_c(qtab), stab=_c(stab), kco=_c(kco), lco=_c(lco),
        mco=_c(mco), wker=wker, phi_term=_c(spec.shared.Phi), eta=eta,
        gamma=_c(spec.shared.Gamma),
    )


# ---------------------------------------------------------------------------
# random initial data


@dataclass(frozen=True)
class RandomInit:
    """Per-type truncated-Gaussian spread of the initial states.

    ``sd`` is one standard deviation for all types or a per-type
    sequence.  Draws are rejected outside ``bound`` standard deviations
    up to ``tries`` times, then clamped.  Every path re-solves the
    per-agent offsets for its drawn initial data, so this mode is meant
    for small studies.
    """

    sd: object
    bound: float = 3.0
    tries: int = 64


def _init_sds(ri: RandomInit, ntypes):
    sds = np.asarray(ri.sd, dtype=float)
    if sds.ndim == 0:
        sds = np.full(ntypes, float(sds))
    if sds.shape != (ntypes,) or np.any(sds < 0) or not np.all(np.isfinite(sds)):
        raise PopulationInputError(
            "random init needs one nonnegative spread per type"
        )
    if not (ri.bound >= 0 and ri.tries >= 1):
        raise PopulationInputError("random init bound and tries must be positive")
    return sds


def _draw_xi(spec, rng, sds, ri: RandomInit):
    n = spec.dims.n
    theta = spec.population.theta
    out = np.empty((spec.dims.N, n))
    for i in range(spec.dims.N):
        k = int(theta[i])
        z = np.zeros(n)
        for _ in range(ri.tries):
            z = rng.standard_normal(n)
            if np.all(np.abs(z) <= ri.bound):
                break
        else:
            z = np.clip(z, -ri.bound, ri.bound)
        out[i] = spec.types[k].xi0 + sds[k] * z
    return out


def _per_agent_aux_tables(spec, strategy, kt: _KernelTables, xi_mat):
    """Kernel tables with one synthetic type per agent for drawn starts.

    The decoupling is unchanged by initial data; the offsets and the
    coefficient tables that absorb them are re-solved per agent.
    """
    grid = strategy.grid
    steps = grid.steps
    n = spec.dims.n
    nagents = spec.dims.N
    theta = kt.typ
    shape2 = (nagents, steps, 2 * n, 2 * n)
    drm = np.empty(shape2)
    sdm = np.empty(shape2)
    drv = np.empty((nagents, steps, 2 * n))
    sdv = np.empty((nagents, steps, 2 * n))
    ug = np.empty((nagents, steps, spec.dims.d, 2 * n))
    uo = np.empty((nagents, steps, spec.dims.d))
    for i in range(nagents):
        k = int(theta[i])
        tsk = strategy.per_type[k]
        cc = replace(
            tsk.blocks.system,
            XiHat=np.concatenate([xi_mat[i], np.zeros(n)]),
        )
        osol = engine.solve_offset(cc, tsk.decoupling, affine=tsk.blocks.affine, grid=grid)
        ts, tb = engine._node_tables(
            cc, engine._phi_fn(tsk.decoupling), engine._psi_fn(osol),
            tsk.blocks.affine, grid,
        )
        ugain, uoffset = _control_tables(spec, k + 1, tb, ts)
        drm[i] = tb["drm"][:steps]
        drv[i] = tb["drv"][:steps]
        sdm[i] = tb["sdm"][:steps]
        sdv[i] = tb["sdv"][:steps]
        ug[i] = ugain[:steps]
        uo[i] = uoffset[:steps]
    order = np.arange(nagents, dtype=np.int64)
    return _KernelTables(
        typ=order, drm=_c(drm), drv=_c(drv), sdm=_c(sdm), sdv=_c(sdv),
        ug=_c(ug), uo=_c(uo), ar=_c(kt.ar[theta]), sig=_c(kt.sig[theta]),
        breal=kt.breal, dreal=kt.dreal, freal=kt.freal, fxhat=kt.fxhat,
        xi=_c(xi_mat),
    )


# ---------------------------------------------------------------------------
# the run


@dataclass
class KeptPaths:
    """Full trajectories and noise of the first few paths."""

    count: int
    xt: np.ndarray
    xa: np.ndarray
    xr: np.ndarray
    u: np.ndarray
    dw: np.ndarray


@dataclass
class PopulationRun:
    """Aggregated Monte Carlo results of the coupled population.

    ``state_integral``/``ctrl_integral`` hold the raw per-path quadratic
    running integrals (the one-half weight is applied by
    :func:`social_cost`); ``u_sq`` the plain squared-control integral;
    ``y0_rows`` the per-path functional whose path mean ``y0`` estimates
    the backward value at time zero; ``xbar`` the empirical average
    trajectory per path.
    """

    grid: Grid
    dims: Dims
    theta: np.ndarray
    paths: int
    seed: object
    perturbed: bool
    state_integral: np.ndarray
    ctrl_integral: np.ndarray
    u_sq: np.ndarray
    y0_rows: np.ndarray
    y0: np.ndarray
    xbar: np.ndarray
    kept: object
    seeds: object
    j_soc: float = 0.0
    per_agent_cost: np.ndarray = None

    def xbar_fn(self, path: int) -> numkit.TimeGridFn:
        """Empirical average trajectory of one path on the coarse grid."""
        if not 0 <= path < self.paths:
            raise PopulationInputError("path %r outside 0..%d" % (path, self.paths - 1))
        return numkit.TimeGridFn(self.xbar[path], self.grid, 1)


class _Aggregates(NamedTuple):
    state: np.ndarray
    ctrl: np.ndarray
    usq: np.ndarray
    y0: np.ndarray
    xbar: np.ndarray
    kept: object


def _ensure_finite(p0, xt, xa, xr, u):
    for role, arr in (
        ("auxiliary stack", xt),
        ("auxiliary state", xa),
        ("real state", xr),
        ("control", u),
    ):
        if np.all(np.isfinite(arr)):
            continue
        c, m, i = (int(v) for v in np.argwhere(~np.isfinite(arr))[0][:3])
        raise SimulationError(
            "non-finite %s for agent %d on path %d at node %d"
            % (role, i + 1, p0 + c, m)
        )


def _reduce_chunk(ct: _CostTables, groups, dt, p0, xt, xa, xr, u, dw, agg: _Aggregates):
    cpaths = xr.shape[0]
    steps = u.shape[1]
    nagents = u.shape[2]
    p1 = p0 + cpaths
    xbar = np.sort(xr, axis=2).sum(axis=2) / nagents
    agg.xbar[p0:p1] = xbar
    sx = np.einsum("mab,cmb->cma", ct.stab, xbar[:, 1:], optimize=False)
    v = xr[:, 1:] - sx[:, :, None, :]
    qv = np.einsum("mab,cmib->cmia", ct.qtab, v, optimize=False)
    agg.state[p0:p1] = dt * np.einsum("cmia,cmia->ci", qv, v, optimize=False)
    agg.usq[p0:p1] = dt * np.einsum("cmia,cmia->ci", u, u, optimize=False)
    mterm = np.einsum("mab,cmb->cma", ct.mco, xbar[:, :steps], optimize=False)
    for k, sel in enumerate(groups):
        if _group_size(sel) == 0:
            continue
        uk = u[:, :, sel]
        ru = np.einsum("mab,cmib->cmia", ct.rtab[k], uk, optimize=False)
        agg.ctrl[p0:p1, sel] = dt * np.einsum("cmia,cmia->ci", ru, uk, optimize=False)
        fint = (
            np.einsum("mad,cmid->cmia", ct.kco, uk, optimize=False)
            + np.einsum("mab,cmib->cmia", ct.lco, xr[:, :steps, sel], optimize=False)
            + mterm[:, :, None, :]
        )
        integ = dt * np.einsum("mab,cmib->cia", ct.wker[k][1:], fint, optimize=False)
        yterm = (
            np.einsum("ab,cib->cia", ct.phi_term, xr[:, steps, sel], optimize=False)
            + ct.eta[k]
        )
        agg.y0[p0:p1, sel] = (
            np.einsum("ab,cib->cia", ct.wker[k][steps], yterm, optimize=False) + integ
        )
    if agg.kept is not None and p0 < agg.kept.count:
        r = min(cpaths, agg.kept.count - p0)
        agg.kept.xt[p0:p0 + r] = xt[:r]
        agg.kept.xa[p0:p0 + r] = xa[:r]
        agg.kept.xr[p0:p0 + r] = xr[:r]
        agg.kept.u[p0:p0 + r] = u[:r]
        agg.kept.dw[p0:p0 + r] = dw[:r]


def _thread_count(threads):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(THREADS_ENV, "").strip()
    return max(1, int(env)) if env else 1


def simulate_population(
    spec,
    strategy: StrategyField,
    paths: int,
    seed,
    *,
    perturb=None,
    random_init=None,
    keep_paths: int = 8,
    noise=None,
    threads=None,
) -> PopulationRun:
    """Monte Carlo sweep of the coupled N-agent system under the rules.

    Per path and agent, a scalar Brownian increment sequence is drawn
    from ``SeedSequence(seed, (path,))``.  ``perturb`` adds a
    deterministic (steps, N, d) control offset to every path (common
    random numbers make finite differences of such runs meaningful).
    ``noise`` injects explicit increments of shape (paths, steps, N) in
    place of the seeded draws.  ``random_init`` draws per-agent initial
    states and re-solves the affected offsets per path.  The first
    ``keep_paths`` paths keep full trajectories and noise.
    """
    if strategy.grid != spec.grid or strategy.dims != spec.dims:
        raise PopulationInputError("strategy was synthesized for a different model")
    paths = int(paths)
    if paths < 1:
        raise PopulationInputError("need at least one path")
    grid = spec.grid
    steps, dt = grid.steps, grid.dt
    n, d, ntypes, nagents = spec.dims.n, spec.dims.d, spec.dims.K, spec.dims.N

    if perturb is None:
        perturb_arr = np.zeros((steps, nagents, d))
        perturbed = False
    else:
        perturb_arr = _c(perturb)
        if perturb_arr.shape != (steps, nagents, d):
            raise PopulationInputError(
                "perturb must have shape (%d, %d, %d); got %r"
                % (steps, nagents, d, np.shape(perturb))
            )
        if not np.all(np.isfinite(perturb_arr)):
            raise PopulationInputError("perturb must be finite")
        perturbed = True

    if noise is not None:
        noise = _c(noise)
        if noise.shape != (paths, steps, nagents):
            raise PopulationInputError(
                "noise must have shape (%d, %d, %d); got %r"
                % (paths, steps, nagents, noise.shape)
            )

    kt = _kernel_tables(spec, strategy)
    ct = _cost_tables(spec, strategy)
    groups = _type_groups(kt.typ, ntypes)
    sds = _init_sds(random_init, ntypes) if random_init is not None else None

    kp = min(max(int(keep_paths), 0), paths)
    kept = None
    if kp > 0:
        kept = KeptPaths(
            count=kp,
            xt=np.empty((kp, steps + 1, nagents, 2 * n)),
            xa=np.empty((kp, steps + 1, nagents, n)),
            xr=np.empty((kp, steps + 1, nagents, n)),
            u=np.empty((kp, steps, nagents, d)),
            dw=np.empty((kp, steps, nagents)),
        )
    agg = _Aggregates(
        state=np.empty((paths, nagents)),
        ctrl=np.empty((paths, nagents)),
        usq=np.empty((paths, nagents)),
        y0=np.empty((paths, nagents, n)),
        xbar=np.empty((paths, steps + 1, n)),
        kept=kept,
    )

    root = sqrt(dt)
    chunk = 1 if random_init is not None else max(1, MAX_CHUNK_STATES // max(1, nagents))
    bounds = [(p0, min(p0 + chunk, paths)) for p0 in range(0, paths, chunk)]

    def work(span):
        p0, p1 = span
        cpaths = p1 - p0
        if noise is not None:
            dw = noise[p0:p1]
        else:
            dw = np.empty((cpaths, steps, nagents))
            for j, p in enumerate(range(p0, p1)):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=seed, spawn_key=(p,))
                )
                dw[j] = rng.standard_normal((steps, nagents)) * root
        if random_init is not None:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(p0, 7))
            )
            xi_mat = _draw_xi(spec, rng, sds, random_init)
            tables = _per_agent_aux_tables(spec, strategy, kt, xi_mat)
        else:
            tables = kt
        xt = np.empty((cpaths, steps + 1, nagents, 2 * n))
        xa = np.empty((cpaths, steps + 1, nagents, n))
        xr = np.empty((cpaths, steps + 1, nagents, n))
        u = np.empty((cpaths, steps, nagents, d))
        backend.step_chunk(
            tables.typ, tables.drm, tables.drv, tables.sdm, tables.sdv,
            tables.ug, tables.uo, tables.ar, tables.sig, tables.breal,
            tables.dreal, tables.freal, tables.fxhat, tables.xi, dt, dw,
            perturb_arr, xt, xa, xr, u,
        )
        _ensure_finite(p0, xt, xa, xr, u)
        _reduce_chunk(ct, groups, dt, p0, xt, xa, xr, u, dw, agg)

    workers = _thread_count(threads)
    if workers == 1 or len(bounds) == 1:
        for span in bounds:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(work, bounds):
                pass

    run = PopulationRun(
        grid=grid,
        dims=spec.dims,
        theta=kt.typ.copy(),
        paths=paths,
        seed=seed,
        perturbed=perturbed,
        state_integral=agg.state,
        ctrl_integral=agg.ctrl,
        u_sq=agg.usq,
        y0_rows=agg.y0,
        y0=agg.y0.mean(axis=0),
        xbar=agg.xbar,
        kept=kept,
        seeds=None if noise is not None else [(seed, p) for p in range(paths)],
    )
    summary = social_cost(run, spec)
    run.j_soc = summary.j_soc
    run.per_agent_cost = summary.per_agent
    return run


# ---------------------------------------------------------------------------
# statistics


@dataclass
class SocialCost:
    """Population cost summary with an influence-function standard error."""

    j_soc: float
    per_agent: np.ndarray
    stderr: float
    q_term: float
    r_term: float
    gamma_term: float
    path_costs: np.ndarray


class MCEstimate(NamedTuple):
    value: float
    stderr: float


def _canonical_sum(values, groups):
    """Sum over agents with each type's block sorted ascending first."""
    total = None
    for sel in groups:
        if _group_size(sel) == 0:
            continue
        part = np.sort(values[..., sel], axis=-1).sum(axis=-1)
        total = part if total is None else total + part
    if total is None:
        return np.zeros(values.shape[:-1])
    return total


def social_cost(run: PopulationRun, spec) -> SocialCost:
    """Social cost of the run: path means, canonical agent sums.

    The quadratic initial-value term uses the Monte Carlo estimate of the
    backward value; the standard error linearizes that term around its
    mean, so each path contributes one scalar whose spread is reported.
    """
    groups = _type_groups(run.theta, spec.dims.K)
    gamma = np.asarray(spec.shared.Gamma, dtype=float)
    gy = run.y0 @ gamma.T
    gvals = 0.5 * np.einsum("ia,ia->i", gy, run.y0, optimize=False)
    state_mean = run.state_integral.mean(axis=0)
    ctrl_mean = run.ctrl_integral.mean(axis=0)
    per_agent = 0.5 * (state_mean + ctrl_mean) + gvals
    j_soc = float(_canonical_sum(per_agent, groups))
    q_term = float(_canonical_sum(0.5 * state_mean, groups))
    r_term = float(_canonical_sum(0.5 * ctrl_mean, groups))
    gamma_term = float(_canonical_sum(gvals, groups))
    contrib = (
        0.5 * (run.state_integral + run.ctrl_integral)
        + np.einsum("pia,ia->pi", run.y0_rows, gy, optimize=False)
        - gvals
    )
    path_costs = _canonical_sum(contrib, groups)
    if run.paths > 1:
        stderr = float(path_costs.std(ddof=1) / sqrt(run.paths))
    else:
        stderr = 0.0
    return SocialCost(
        j_soc=j_soc,
        per_agent=per_agent,
        stderr=stderr,
        q_term=q_term,
        r_term=r_term,
        gamma_term=gamma_term,
        path_costs=path_costs,
    )


def meanfield_error(run: PopulationRun, mf) -> MCEstimate:
    """Monte Carlo estimate of the worst squared gap to the consistency mean.

    Per path, the supremum over coarse nodes of the squared Euclidean
    distance between the empirical average and the profile mean; the
    estimate is its path mean.
    """
    if mf.grid != run.grid:
        raise PopulationInputError("run and profile live on different grids")
    xhat = np.stack([np.asarray(mf.Xhat.node(m)) for m in range(run.grid.steps + 1)])
    diff = run.xbar - xhat[None]
    worst = np.einsum("pma,pma->pm", diff, diff, optimize=False).max(axis=1)
    est = float(worst.mean())
    stderr = float(worst.std(ddof=1) / sqrt(run.paths)) if run.paths > 1 else 0.0
    return MCEstimate(est, stderr)


# ---------------------------------------------------------------------------
# optimality gap


@dataclass
class GapReport:
    """Directional derivatives of the social cost at the synthesized rules."""

    labels: list
    derivatives: np.ndarray
    stderrs: np.ndarray
    max_abs: float
    eps_fd: float
    j_base: float
    j_base_stderr: float
    paths: int
    seed: object


def build_directions(spec, seed=0):
    """Reproducible perturbation library: labeled (steps, N, d) arrays.

    Three families, each normalized to unit total squared integral:
    one coherent constant per control coordinate that moves every agent
    together (the channel where a shared shift is felt), one constant
    per (type, control coordinate) on the type's first agent, and five
    seeded piecewise-constant directions over all agents on four equal
    cells.
    """
    steps = spec.grid.steps
    dt = spec.grid.dt
    nagents, d = spec.dims.N, spec.dims.d
    theta = spec.population.theta
    out = []
    shared = 1.0 / sqrt(nagents * spec.grid.T)
    for j in range(d):
        arr = np.zeros((steps, nagents, d))
        arr[:, :, j] = shared
        out.append(("const_all_u%d" % (j + 1), arr))
    level = 1.0 / sqrt(spec.grid.T)
    for k in range(spec.dims.K):
        idx = np.flatnonzero(theta == k)
        if idx.size == 0:
            continue
        first = int(idx[0])
        for j in range(d):
            arr = np.zeros((steps, nagents, d))
            arr[:, first, j] = level
            out.append(("const_type%d_u%d" % (k + 1, j + 1), arr))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11, 4)))
    cells = min(4, steps)
    for r in range(5):
        vals = rng.standard_normal((cells, nagents, d))
        arr = np.empty((steps, nagents, d))
        for m in range(steps):
            arr[m] = vals[m * cells // steps]
        norm = sqrt(dt * float(np.sum(arr * arr)))
        out.append(("rand%d" % (r + 1), arr / norm))
    return out


def _coerce_directions(spec, directions):
    steps, nagents, d = spec.grid.steps, spec.dims.N, spec.dims.d
    pairs = []
    for pos, item in enumerate(directions):
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], str):
            label, arr = item
        else:
            label, arr = "dir%d" % (pos + 1), item
        arr = _c(arr)
        if arr.shape != (steps, nagents, d) or not np.all(np.isfinite(arr)):
            raise PopulationInputError(
                "direction %r must be a finite (%d, %d, %d) array"
                % (label, steps, nagents, d)
            )
        pairs.append((label, arr))
    if not pairs:
        raise PopulationInputError("need at least one perturbation direction")
    return pairs


def optimality_gap(
    spec,
    strategy: StrategyField,
    directions=None,
    eps_fd=None,
    paths: int = 256,
    seed=0,
    threads=None,
) -> GapReport:
    """Central finite differences of the social cost along each direction.

    Derivatives are reported per agent (the social-cost response divided
    by the population size), so values are comparable across runs with
    different populations. All runs share the seed, so every path sees
    identical noise in the base and the two perturbed simulations; the
    reported per-direction standard error is the spread of the per-path
    difference quotients.
    """
    if directions is None:
        directions = build_directions(spec, seed=seed)
    pairs = _coerce_directions(spec, directions)
    base = simulate_population(
        spec, strategy, paths, seed, keep_paths=0, threads=threads
    )
    sc0 = social_cost(base, spec)
    if eps_fd is None:
        level = sqrt(base.u_sq.mean() / spec.grid.T)
        eps_fd = 1e-3 * max(1.0, level)
    eps_fd = float(eps_fd)
    if not (eps_fd > 0 and np.isfinite(eps_fd)):
        raise PopulationInputError("eps_fd must be a positive number")
    labels = []
    derivs = np.empty(len(pairs))
    errs = np.empty(len(pairs))
    for pos, (label, arr) in enumerate(pairs):
        up = simulate_population(
            spec, strategy, paths, seed,
            perturb=eps_fd * arr, keep_paths=0, threads=threads,
        )
        dn = simulate_population(
            spec, strategy, paths, seed,
            perturb=-eps_fd * arr, keep_paths=0, threads=threads,
        )
        scp = social_cost(up, spec)
        scn = social_cost(dn, spec)
        scale = 2.0 * eps_fd * spec.dims.N
        quot = (scp.path_costs - scn.path_costs) / scale
        labels.append(label)
        derivs[pos] = (scp.j_soc - scn.j_soc) / scale
        errs[pos] = quot.std(ddof=1) / sqrt(paths) if paths > 1 else 0.0
    return GapReport(
        labels=labels,
        derivatives=derivs,
        stderrs=errs,
        max_abs=float(np.max(np.abs(derivs))),
        eps_fd=eps_fd,
        j_base=sc0.j_soc,
        j_base_stderr=sc0.stderr,
        paths=paths,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x):
    return "%.17g" % float(x)


def dump_cost_csv(entries, path):
    """Cost table: one row per (run, cost) pair."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["N", "P", "seed", "J_soc", "J_soc_per_agent", "stderr",
             "q_term", "r_term", "gamma_term"]
        )
        for run, cost in entries:
            writer.writerow(
                [run.dims.N, run.paths, run.seed, _fmt(cost.j_soc),
                 _fmt(cost.j_soc / run.dims.N), _fmt(cost.stderr),
                 _fmt(cost.q_term), _fmt(cost.r_term), _fmt(cost.gamma_term)]
            )


def dump_rate_csv(rows, path):
    """Rate table: rows of (N, meanfield_error, stderr, max_gap)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "meanfield_error", "stderr", "max_gap"])
        for nagents, est, stderr, max_gap in rows:
            writer.writerow([nagents, _fmt(est), _fmt(stderr), _fmt(max_gap)])


def dump_agent_csv(run: PopulationRun, agent: int, path):
    """Kept-path trajectory dump for one agent (numbered from 1)."""
    if run.kept is None:
        raise PopulationInputError("run kept no full paths")
    if not 1 <= agent <= run.dims.N:
        raise PopulationInputError(
            "agent %r outside 1..%d" % (agent, run.dims.N)
        )
    i = agent - 1
    n, d = run.dims.n, run.dims.d
    steps = run.grid.steps
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["path", "node", "t"]
        header += ["x_real_%d" % (j + 1) for j in range(n)]
        header += ["x_aux_%d" % (j + 1) for j in range(n)]
        header += ["u_%d" % (j + 1) for j in range(d)]
        header.append("dW")
        writer.writerow(header)
        for p in range(run.kept.count):
            for m in range(steps + 1):
                row = [p, m, _fmt(m * run.grid.dt)]
                row += [_fmt(v) for v in run.kept.xr[p, m, i]]
                row += [_fmt(v) for v in run.kept.xa[p, m, i]]
                if m < steps:
                    row += [_fmt(v) for v in run.kept.u[p, m, i]]
                    row.append(_fmt(run.kept.dw[p, m, i]))
                else:
                    row += [""] * (d + 1)
                writer.writerow(row)
