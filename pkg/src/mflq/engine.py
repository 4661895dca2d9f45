"""Decoupled solve-and-simulate for assembled forward-backward systems.

The backward component is represented through the decoupling ansatz
``Y = phi Xtilde + psi`` where ``phi`` solves the matrix Riccati flow
(:mod:`mflq.riccati`) and ``psi`` solves a linear backward ODE with the
same algebraic skeleton.  Once both are known, the transformed forward
state ``Xtilde = X - GammaHat Y - XiHat`` closes into a plain SDE whose
drift and diffusion are affine in ``Xtilde``; simulation is then a
single forward Euler-Maruyama sweep per path, with the martingale
component recovered pointwise from the reconstruction identity

    [phi (D2 - GammaHat Ihat) - Ihat] Z = -phi [C X + D1 Y + Sigma0].

Deterministic mode is the same sweep with zero noise increments, so the
two modes agree bitwise by construction.  The terminal coupling of the
ansatz holds to machine precision by the Ibar inverse identity, so the
discretization-level correctness signal is a *backward replay*: the
backward equation is re-integrated forward with the ansatz inputs and
its terminal value is compared against the boundary data, giving a
residual of order dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .assembly import AffineInputs, MeanFieldInputError
from .numkit import TimeGridFn
from .riccati import ZFactor, _flow_matrices

__all__ = [
    "OffsetSolution",
    "DecoupledSolution",
    "solve_offset",
    "reconstruct_z",
    "simulate_decoupled",
    "solve_deterministic",
]


def _phi_fn(phi) -> TimeGridFn:
    """Accept a RiccatiSolution or a bare TimeGridFn."""
    return getattr(phi, "phi", phi)


def _psi_fn(psi) -> TimeGridFn:
    """Accept an OffsetSolution or a bare TimeGridFn."""
    return getattr(psi, "psi", psi)


@dataclass
class OffsetSolution:
    """Offset of the decoupling ansatz.

    ``psi`` is a vector-valued :class:`TimeGridFn`; ``b_is_zero`` records
    that the offset was solved in deterministic-data mode, where the
    martingale part of the offset equation vanishes and the backward
    equation closes into an ODE.  Random initial data is handled by
    re-solving the offset per draw with that draw's data, so the flag is
    true for every solution this module produces.
    """

    psi: TimeGridFn
    b_is_zero: bool = True


@dataclass
class DecoupledSolution:
    """Trajectories of one decoupled solve.

    In stochastic mode each field is an array of shape
    ``(paths, steps + 1, dim)``; in deterministic mode each field is a
    :class:`TimeGridFn` over the same nodes.  ``initial_residual`` holds
    the per-path sup-norm of ``X(0) - XiHat - GammaHat Y(0)`` (zero up
    to roundoff by construction) and ``terminal_residual`` the per-path
    sup-norm of the backward replay's terminal coupling error, which
    shrinks linearly with the step size.
    """

    xtilde: object
    x: object
    y: object
    z: object
    grid: object
    deterministic: bool
    initial_residual: np.ndarray
    terminal_residual: np.ndarray


def solve_offset(cc, phi, affine=None, grid=None, refine: int = 4) -> OffsetSolution:
    """Integrate the offset ODE backward from its coupled terminal value.

    ``cc`` is an assembled coefficient set, ``phi`` the Riccati solution
    on the same grid, ``affine`` optional drift inhomogeneities (used by
    the frozen-coupling and per-agent systems).  The terminal value
    ``Ibar (PhiHat XiHat + SigmaHat)`` is imposed exactly.
    """
    grid = cc.grid if grid is None else grid
    pfn = _phi_fn(phi)
    aff = affine if affine is not None else AffineInputs()
    gh = cc.GammaHat
    psi_term = cc.Ibar @ (cc.PhiHat @ cc.XiHat + cc.SigmaHat)

    def rhs(t, psi):
        a, b, q, a3 = _flow_matrices(cc, t)
        p = pfn.at(t)
        fy = aff.fy_at(t, cc.ny)
        drive = a @ cc.XiHat + aff.fx_at(t, cc.nx) + gh @ fy
        out = -(b @ psi) - p @ (q @ psi) - p @ drive - a3 @ cc.XiHat - fy
        bracket = p @ (cc.B2.at(t) + gh @ cc.B3.at(t)) + cc.B3.at(t)
        if np.any(bracket):
            mvec = p @ (
                (cc.C.at(t) @ gh + cc.D1.at(t)) @ psi
                + cc.C.at(t) @ cc.XiHat
                + cc.Sigma0Hat.at(t)
            )
            if np.any(mvec):
                zf = ZFactor(cc, p, t, context="martingale factor in offset flow at t=%.6g" % t)
                out = out + bracket @ zf.offset(mvec)
        return out

    psi = numkit.rk4_integrate(
        rhs, psi_term, grid, direction="backward", refine=refine, context="offset flow"
    )
    return OffsetSolution(psi=psi, b_is_zero=True)


def _z_maps(cc, p: np.ndarray, s: np.ndarray, t: float):
    """Gain and offset of the martingale reconstruction at one time.

    Returns ``(gain, off)`` such that ``Z = -gain @ xtilde - off``.
    """
    cmat = cc.C.at(t)
    mix = cmat @ cc.GammaHat + cc.D1.at(t)
    zf = ZFactor(cc, p, t, context="martingale reconstruction at t=%.6g" % t)
    gain = zf.gain(p @ cmat + p @ (mix @ p))
    off = zf.offset(p @ (mix @ s + cmat @ cc.XiHat + cc.Sigma0Hat.at(t)))
    return gain, off


def reconstruct_z(cc, phi, psi, xtilde_value, t: float) -> np.ndarray:
    """Martingale component at time ``t`` for a given transformed state."""
    p = _phi_fn(phi).at(t)
    s = _psi_fn(psi).at(t)
    gain, off = _z_maps(cc, p, s, t)
    return -(gain @ np.asarray(xtilde_value, dtype=float)) - off


def _y_noise_route(cc) -> np.ndarray:
    """Noise-class index per backward component, read off the lift rows.

    Row ``i`` of Ihat selects which martingale components drive the i-th
    backward coordinate; all of them share one noise class by
    construction, so the first nonzero column decides.  Rows without a
    lift entry carry no noise and default to class 0.
    """
    route = np.zeros(cc.ny, dtype=int)
    for i in range(cc.ny):
        cols = np.flatnonzero(cc.Ihat[i])
        if cols.size:
            route[i] = cc.noise_idx[cols[0]]
    return route


def _node_tables(cc, pfn, sfn, aff, grid):
    """Per-node coefficient tables for the Euler-Maruyama sweep."""
    ts = numkit.grid_times(grid)
    nodes = grid.steps + 1
    nx, ny = cc.nx, cc.ny
    gh, ih = cc.GammaHat, cc.Ihat
    tb = {
        "phi": np.empty((nodes, ny, nx)),
        "psi": np.empty((nodes, ny)),
        "gain": np.empty((nodes, nx, nx)),
        "off": np.empty((nodes, nx)),
        "drm": np.empty((nodes, nx, nx)),
        "drv": np.empty((nodes, nx)),
        "sdm": np.empty((nodes, nx, nx)),
        "sdv": np.empty((nodes, nx)),
        "xm": np.empty((nodes, nx, nx)),
        "xv": np.empty((nodes, nx)),
        "a2": np.empty((nodes, ny, ny)),
        "a3": np.empty((nodes, ny, nx)),
        "b3": np.empty((nodes, ny, nx)),
        "fy": np.empty((nodes, ny)),
    }
    eye = np.eye(nx)
    for m, t in enumerate(ts):
        p = pfn.at(t)
        s = sfn.at(t)
        a, b, q, a3 = _flow_matrices(cc, t)
        cmat = cc.C.at(t)
        mix = cmat @ gh + cc.D1.at(t)
        d2g = cc.D2.at(t) - gh @ ih
        gain, off = _z_maps(cc, p, s, t)
        bmat = cc.B2.at(t) + gh @ cc.B3.at(t)
        fx = aff.fx_at(t, nx)
        fy = aff.fy_at(t, ny)
        sig0 = cc.Sigma0Hat.at(t)
        tb["phi"][m] = p
        tb["psi"][m] = s
        tb["gain"][m] = gain
        tb["off"][m] = off
        tb["drm"][m] = a + q @ p - bmat @ gain
        tb["drv"][m] = q @ s + a @ cc.XiHat + fx + gh @ fy - bmat @ off
        tb["sdm"][m] = cmat + mix @ p - d2g @ gain
        tb["sdv"][m] = mix @ s + cmat @ cc.XiHat + sig0 - d2g @ off
        tb["xm"][m] = eye + gh @ p
        tb["xv"][m] = gh @ s + cc.XiHat
        tb["a2"][m] = cc.A2.at(t)
        tb["a3"][m] = cc.A3.at(t)
        tb["b3"][m] = cc.B3.at(t)
        tb["fy"][m] = fy
    return ts, tb


def simulate_decoupled(cc, phi, psi, noise_paths, grid=None, affine=None) -> DecoupledSolution:
    """Euler-Maruyama forward sweep of the decoupled system, one row per path.

    ``noise_paths`` holds Brownian increments with shape
    ``(paths, steps, n_noise)``.  The backward trajectory is *defined*
    through the ansatz at every node; separately, the backward equation
    is replayed forward with the ansatz inputs and its terminal coupling
    error is recorded per path (the discretization-level correctness
    signal).
    """
    grid = cc.grid if grid is None else grid
    noise = np.asarray(noise_paths, dtype=float)
    want = (grid.steps, cc.n_noise)
    if noise.ndim != 3 or noise.shape[1:] != want:
        raise MeanFieldInputError(
            "noise increments must have shape (paths, %d, %d); got %r"
            % (want[0], want[1], noise.shape)
        )
    pfn = _phi_fn(phi)
    sfn = _psi_fn(psi)
    aff = affine if affine is not None else AffineInputs()
    ts, tb = _node_tables(cc, pfn, sfn, aff, grid)

    paths = noise.shape[0]
    nx = cc.nx
    dt = grid.dt
    route_x = cc.noise_idx
    route_y = _y_noise_route(cc)
    ihat_t = cc.Ihat.T

    xt = np.empty((paths, grid.steps + 1, nx))
    xt[:, 0] = 0.0
    state = np.zeros((paths, nx))
    ycos = np.broadcast_to(tb["psi"][0], (paths, cc.ny)).copy()
    # escapes raise below, so intermediate overflow must not warn
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(grid.steps):
            dwx = noise[:, m][:, route_x]
            dwy = noise[:, m][:, route_y]
            xfull = state @ tb["xm"][m].T + tb["xv"][m]
            zm = -(state @ tb["gain"][m].T) - tb["off"][m]
            ydrift = ycos @ tb["a2"][m].T + xfull @ tb["a3"][m].T + zm @ tb["b3"][m].T + tb["fy"][m]
            ycos = ycos - dt * ydrift + (zm @ ihat_t) * dwy
            diff = state @ tb["sdm"][m].T + tb["sdv"][m]
            state = state + dt * (state @ tb["drm"][m].T + tb["drv"][m]) + diff * dwx
            if not np.all(np.isfinite(state)):
                raise numkit.NonFiniteError(
                    "non-finite state at t=%.6g (node %d) in decoupled simulation"
                    % (ts[m + 1], m + 1)
                )
            xt[:, m + 1] = state

    y = np.einsum("mij,pmj->pmi", tb["phi"], xt, optimize=False) + tb["psi"][None]
    z = -np.einsum("mij,pmj->pmi", tb["gain"], xt, optimize=False) - tb["off"][None]
    x = xt + np.einsum("ij,pmj->pmi", cc.GammaHat, y, optimize=False) + cc.XiHat[None, None]

    init_res = np.max(np.abs(x[:, 0] - cc.XiHat - y[:, 0] @ cc.GammaHat.T), axis=1)
    term_data = x[:, -1] @ cc.PhiHat.T + cc.SigmaHat
    term_res = np.max(np.abs(ycos - term_data), axis=1)
    return DecoupledSolution(
        xtilde=xt,
        x=x,
        y=y,
        z=z,
        grid=grid,
        deterministic=False,
        initial_residual=init_res,
        terminal_residual=term_res,
    )


def solve_deterministic(cc, phi, psi, grid=None, affine=None) -> DecoupledSolution:
    """Deterministic-mode solve: the stochastic sweep with zero increments.

    Shares every line of arithmetic with :func:`simulate_decoupled`, so
    the two modes agree bitwise on zero noise; the trajectory fields are
    returned as :class:`TimeGridFn` tables over the grid nodes.
    """
    grid = cc.grid if grid is None else grid
    zero = np.zeros((1, grid.steps, cc.n_noise))
    sol = simulate_decoupled(cc, phi, psi, zero, grid, affine=affine)
    return DecoupledSolution(
        xtilde=TimeGridFn(sol.xtilde[0], grid, 1),
        x=TimeGridFn(sol.x[0], grid, 1),
        y=TimeGridFn(sol.y[0], grid, 1),
        z=TimeGridFn(sol.z[0], grid, 1),
        grid=grid,
        deterministic=True,
        initial_residual=sol.initial_residual,
        terminal_residual=sol.terminal_residual,
    )
