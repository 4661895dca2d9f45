"""Mean-field consistency solve and the aggregate drift it induces.

The stacked expectation system couples every type's mean dynamics through
the population average ``Xhat = sum_l pi_l E alpha_l``.  Solving the
assembled two-point system once (Riccati decoupling, offset, then a
deterministic forward cascade) yields all mean-field inputs a single
agent needs: ``Xhat`` itself, the adjoint means ``vartheta_k``, the
auxiliary pairs ``Xcheck_k`` / ``E Ycheck_k``, and the composed
aggregate-cost drift ``Theta``.

The deterministic cascade is integrated with the classical fourth-order
scheme on a half-step lattice, so its stage times land exactly on the
stored quarter-step nodes of the Riccati and offset tables.  That keeps
the profile accurate enough for ``fixed_point_residual`` to certify
self-consistency near round-off of the scheme rather than at the
first-order level of the path simulator.
"""

from dataclasses import dataclass
import csv

import numpy as np

from . import assembly, engine, numkit, riccati
from .model import Grid, ModelSpec
from .numkit import TimeGridFn

__all__ = [
    "ConsistencyError",
    "MeanFieldProfile",
    "solve_consistency",
    "fixed_point_residual",
    "dump_profile_csv",
]

#: boundary-coupling residual above which the solve is rejected outright
COUPLING_TOL = 1e-6


class ConsistencyError(ArithmeticError):
    """The solved expectation system violates its boundary couplings."""


@dataclass
class MeanFieldProfile:
    """Deterministic mean-field quantities on one time grid.

    All tables are ``TimeGridFn`` objects on ``grid`` with stored values
    at half-step nodes.  ``vartheta``, ``Xcheck``, ``EYcheck``,
    ``Ealpha``, ``Ealphat`` and ``Ebeta`` hold one table per type, in
    type order.  ``Ez`` is the martingale-component mean of the stacked
    one-level system (forward block layout), kept for cross-checks
    against boundary-value solvers.
    """

    grid: Grid
    Xhat: TimeGridFn
    Theta: TimeGridFn
    vartheta: list
    Xcheck: list
    EYcheck: list
    Ealpha: list
    Ealphat: list
    Ebeta: list
    Ez: TimeGridFn
    riccati_method: str
    boundary_residual: float


def _solve_riccati(cc, grid, method=None):
    """Riccati solve with the documented fallback order.

    The direct flow handles every assembled system; when it breaks down
    on a constant-coefficient instance inside the linearizable regime,
    the exponential construction is tried before giving up.
    """
    if method is not None:
        return riccati.solve(cc, grid, method=method)
    try:
        return riccati.solve_direct(cc, grid)
    except (numkit.SingularMatrixError, numkit.NonFiniteError):
        if cc.constant_dynamics and cc.special_case:
            return riccati.solve_exponential(cc, grid)
        raise


def _cascade_rhs(cc, pfn, sfn, aff):
    """Drift of the transformed forward mean under the decoupling ansatz."""
    gh = cc.GammaHat

    def rhs(t, xt):
        a, _, q, _ = riccati._flow_matrices(cc, t)
        p = pfn.at(t)
        s = sfn.at(t)
        gain, off = engine._z_maps(cc, p, s, t)
        bmat = cc.B2.at(t) + gh @ cc.B3.at(t)
        fy = aff.fy_at(t, cc.ny)
        out = a @ (xt + cc.XiHat) + q @ (p @ xt + s)
        out -= bmat @ (gain @ xt + off)
        out += aff.fx_at(t, cc.nx) + gh @ fy
        return out

    return rhs


def _deterministic_tables(cc, rsol, osol, affine=None):
    """Fourth-order forward cascade of the expectation trajectory.

    Returns ``(ts, x, y, z)`` where ``ts`` are the half-step node times
    and the arrays hold the original forward state, the backward state,
    and the martingale component row by row.
    """
    aff = affine if affine is not None else assembly.AffineInputs()
    pfn = rsol.phi if hasattr(rsol, "phi") else rsol
    sfn = osol.psi if hasattr(osol, "psi") else osol
    xt = numkit.rk4_integrate(
        _cascade_rhs(cc, pfn, sfn, aff),
        np.zeros(cc.nx),
        cc.grid,
        direction="forward",
        refine=2,
        context="expectation cascade",
    )
    ts = numkit.grid_times(cc.grid, 2)
    nodes = ts.size
    x = np.empty((nodes, cc.nx))
    y = np.empty((nodes, cc.ny))
    z = np.empty((nodes, cc.nx))
    for m, t in enumerate(ts):
        xtm = xt.values[m]
        p = pfn.at(t)
        s = sfn.at(t)
        y[m] = p @ xtm + s
        gain, off = engine._z_maps(cc, p, s, t)
        z[m] = -(gain @ xtm) - off
        x[m] = xtm + cc.GammaHat @ y[m] + cc.XiHat
    return ts, x, y, z


def _boundary_residual(cc, x, y) -> float:
    initial = x[0] - cc.XiHat - cc.GammaHat @ y[0]
    terminal = y[-1] - cc.PhiHat @ x[-1] - cc.SigmaHat
    return float(max(np.max(np.abs(initial)), np.max(np.abs(terminal))))


def _theta_values(spec: ModelSpec, ts, xhat, vart, eyc, xc) -> np.ndarray:
    """Compose the aggregate drift from the solved mean-field pieces."""
    pi = spec.population.pi
    sh = spec.shared
    out = np.empty_like(xhat)
    for m, t in enumerate(ts):
        q = sh.Q.at(t)
        s = sh.S.at(t)
        fmat = sh.F.at(t)
        mmat = sh.M.at(t)
        qsym = q @ s + s.T @ q - s.T @ q @ s
        acc = qsym @ xhat[m]
        for k in range(spec.dims.K):
            acc = acc - pi[k] * (fmat.T @ vart[k][m])
            acc = acc - pi[k] * (fmat.T @ eyc[k][m] - mmat.T @ xc[k][m])
        out[m] = acc
    return out


def solve_consistency(spec: ModelSpec, method=None) -> MeanFieldProfile:
    """Solve the coupled expectation system on the model grid.

    Pipeline: assemble the stacked system, decouple it through the
    Riccati flow (``method`` forces one construction; by default the
    direct flow with an exponential fallback for constant coefficients),
    integrate the offset, run the deterministic cascade, and read the
    per-type means off the block layout.  Raises ``ConsistencyError``
    when the integrated trajectory violates either boundary coupling by
    more than ``COUPLING_TOL``; Riccati breakdowns and invertibility
    failures propagate from the lower layers.
    """
    cc = assembly.assemble_cc(spec)
    rsol = _solve_riccati(cc, spec.grid, method=method)
    osol = engine.solve_offset(cc, rsol)
    ts, x, y, z = _deterministic_tables(cc, rsol, osol)
    residual = _boundary_residual(cc, x, y)
    if residual > COUPLING_TOL:
        raise ConsistencyError(
            "expectation-system boundary couplings violated: residual %.3g > %.3g"
            % (residual, COUPLING_TOL)
        )

    grid = spec.grid
    K = spec.dims.K
    pi = spec.population.pi

    def xtab(name):
        return [
            TimeGridFn(x[:, cc.x_slice("%s_%d" % (name, k + 1))].copy(), grid, 2)
            for k in range(K)
        ]

    def ytab(name):
        return [
            TimeGridFn(y[:, cc.y_slice("%s_%d" % (name, k + 1))].copy(), grid, 2)
            for k in range(K)
        ]

    ealpha = xtab("alpha")
    ealphat = xtab("alphat")
    xcheck = xtab("Xcheck")
    ebeta = ytab("beta")
    eycheck = ytab("Ycheck")
    vartheta = ytab("vartheta")

    xhat = np.zeros((ts.size, spec.dims.n))
    for k in range(K):
        xhat += pi[k] * ealpha[k].values
    theta = _theta_values(
        spec,
        ts,
        xhat,
        [v.values for v in vartheta],
        [v.values for v in eycheck],
        [v.values for v in xcheck],
    )
    dx = cc.x_fluct_offset
    ez = z[:, :dx] + z[:, dx:]
    return MeanFieldProfile(
        grid=grid,
        Xhat=TimeGridFn(xhat, grid, 2),
        Theta=TimeGridFn(theta, grid, 2),
        vartheta=vartheta,
        Xcheck=xcheck,
        EYcheck=eycheck,
        Ealpha=ealpha,
        Ealphat=ealphat,
        Ebeta=ebeta,
        Ez=TimeGridFn(ez, grid, 2),
        riccati_method=rsol.method,
        boundary_residual=residual,
    )


def fixed_point_residual(spec: ModelSpec, mf: MeanFieldProfile, method=None) -> float:
    """Sup-norm self-consistency defect of a profile's population mean.

    The expectation system is re-integrated with ``mf.Xhat`` frozen as
    an exogenous input (type-mixing through the average suppressed), and
    the recomputed ``sum_l pi_l E alpha_l`` is compared against the
    mean recorded in the profile.  A profile produced by
    ``solve_consistency`` is a fixed point up to scheme error; the
    residual responds to ``Xhat`` perturbations exactly through the
    mean-coupling channels and is identically zero when those channels
    (``F``, ``M`` and the ``Q``/``S`` mixing) vanish.
    """
    cc, affine = assembly.assemble_cc_frozen(spec, mf.Xhat)
    rsol = _solve_riccati(cc, spec.grid, method=method)
    osol = engine.solve_offset(cc, rsol, affine=affine)
    _, x, _, _ = _deterministic_tables(cc, rsol, osol, affine=affine)
    pi = spec.population.pi
    recomputed = np.zeros((x.shape[0], spec.dims.n))
    recorded = np.zeros_like(recomputed)
    for k in range(spec.dims.K):
        recomputed += pi[k] * x[:, cc.x_slice("alpha_%d" % (k + 1))]
        recorded += pi[k] * mf.Ealpha[k].values
    return float(np.max(np.abs(recomputed - recorded)))


def dump_profile_csv(mf: MeanFieldProfile, path) -> None:
    """Write the profile to CSV, one row per grid node."""
    n = mf.Xhat.values.shape[1]
    K = len(mf.vartheta)
    header = ["node", "t"]
    for i in range(n):
        header.append("Xhat_%d" % (i + 1))
    for i in range(n):
        header.append("Theta_%d" % (i + 1))
    for k in range(K):
        for i in range(n):
            header.append("vartheta%d_%d" % (k + 1, i + 1))
        for i in range(n):
            header.append("Xcheck%d_%d" % (k + 1, i + 1))
        for i in range(n):
            header.append("EYcheck%d_%d" % (k + 1, i + 1))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for m in range(mf.grid.steps + 1):
            row = ["%d" % m, "%.17g" % (m * mf.grid.dt)]
            row.extend("%.17g" % v for v in mf.Xhat.node(m))
            row.extend("%.17g" % v for v in mf.Theta.node(m))
            for k in range(K):
                row.extend("%.17g" % v for v in mf.vartheta[k].node(m))
                row.extend("%.17g" % v for v in mf.Xcheck[k].node(m))
                row.extend("%.17g" % v for v in mf.EYcheck[k].node(m))
            writer.writerow(row)
