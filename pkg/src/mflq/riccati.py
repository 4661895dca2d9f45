"""Decoupling-field solvers for the assembled forward-backward system.

The decoupling ansatz y = phi x~ + psi reduces the mixed-boundary system to
a forward SDE plus two backward ODEs.  The field phi (ny x nx, generally
non-square and non-symmetric) solves a terminal-value Riccati equation

    phi' = -phi a - b phi - phi q phi - A3 + [phi (B2 + GammaHat B3) + B3] G

with
    a = A1 + GammaHat A3
    b = A2 + A3 GammaHat
    q = A1 GammaHat + GammaHat A3 GammaHat + GammaHat A2 + B1
    G = W^- [phi C + phi (C GammaHat + D1) phi]
    W = phi (D2 - GammaHat Ihat) - Ihat
    phi(T) = Ibar PhiHat.

Three solvers are provided: direct backward RK4 of the full equation, a
fundamental-pair linearization phi = V U^{-1}, and a closed-form matrix
exponential (with a propagator variant for time-varying coefficients).
The last two linearize the reduced equation without the W-inverse term,
so they require the regime in which that term vanishes identically
(``cc.special_case``: either both B2/B3 blocks or both C/D1 blocks zero).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numkit
from .model import Grid
from .numkit import TimeGridFn

__all__ = [
    "SpecialCaseError",
    "DeterminantConditionError",
    "RiccatiSolution",
    "ZFactor",
    "solve_direct",
    "solve_fundamental",
    "solve_exponential",
    "solve",
    "dump_riccati_csv",
]


class SpecialCaseError(ValueError):
    """Solver requires the regime where the quadratic inverse term vanishes."""


class DeterminantConditionError(ArithmeticError):
    """The exponential-formula invertibility condition failed at a node."""


@dataclass
class RiccatiSolution:
    """Decoupling field on the refined grid plus diagnostics.

    ``pivot_margins[m]`` is 1/cond of the martingale-reconstruction factor
    W at coarse node m (0 when W is singular but unused); ``terminal_check``
    is the sup-norm defect of phi(T) against Ibar PhiHat.
    """

    phi: TimeGridFn
    method: str
    min_pivot_margin: float
    terminal_check: float
    pivot_margins: np.ndarray


class ZFactor:
    """QR factorization of W = phi (D2 - GammaHat Ihat) - Ihat at one time.

    For the mean/fluctuation-doubled system W has exactly duplicated column
    halves (the diffusion blocks and the lift are copied across both bands),
    so only the sum of the two martingale bands is determined by the
    reconstruction identity; the factor is reduced to its left half and
    solves return that half-width solution.  The band split is recovered
    structurally: the x-coefficient gain is block diagonal across bands and
    the inhomogeneous offset lives in the mean band alone (the fluctuation
    forcings are centred).  For square systems W is used as is.

    Solves are least squares with an explicit residual check, since the tall
    factor carries structurally redundant rows that must be consistent for
    the reconstruction to be meaningful.
    """

    def __init__(self, cc, phi_value, t: float, context: str = "martingale factor"):
        self.context = context
        w = phi_value @ (cc.D2.at(t) - cc.GammaHat @ cc.Ihat) - cc.Ihat
        self.split = cc.nx // 2 if cc.doubled else None
        if self.split is not None:
            w = w[:, : self.split]
        self.w = w
        self.q, r = np.linalg.qr(w)
        try:
            rinv = np.linalg.inv(r)
        except np.linalg.LinAlgError:
            raise numkit.SingularMatrixError("%s: factor is singular" % context) from None
        # scale-aware condition: the identity lift gives W a natural O(1)
        # scale, so a uniformly tiny factor is a breach too, not just a
        # badly conditioned one
        cond = max(np.linalg.norm(r, 1), 1.0) * np.linalg.norm(rinv, 1)
        if not np.isfinite(cond) or cond > numkit.COND_LIMIT:
            raise numkit.SingularMatrixError(
                "%s: factor condition %.3g exceeds %.3g" % (context, cond, numkit.COND_LIMIT)
            )
        self.rinv = rinv
        self.margin = 1.0 / cond

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Least-squares solve of the (reduced) factor against ny-row data."""
        rhs = np.asarray(rhs, dtype=float)
        s = self.rinv @ (self.q.T @ rhs)
        s = s + self.rinv @ (self.q.T @ (rhs - self.w @ s))
        resid = np.max(np.abs(rhs - self.w @ s)) if rhs.size else 0.0
        scale = max(1.0, np.max(np.abs(rhs))) if rhs.size else 1.0
        if resid > 1e-8 * scale:
            raise numkit.SingularMatrixError(
                "%s: reconstruction inconsistent (residual %.3g)" % (self.context, resid)
            )
        return s

    def gain(self, num: np.ndarray) -> np.ndarray:
        """Full nx-by-nx martingale gain from the x-coefficient numerator."""
        if self.split is None:
            return self.solve(num)
        h = self.split
        out = np.zeros((2 * h, 2 * h))
        out[:h, :h] = self.solve(num[:, :h])
        out[h:, h:] = self.solve(num[:, h:])
        return out

    def offset(self, vec: np.ndarray) -> np.ndarray:
        """Full nx martingale offset from the ny inhomogeneity vector."""
        if self.split is None:
            return self.solve(vec)
        return np.concatenate([self.solve(vec), np.zeros(self.split)])


def _flow_matrices(cc, t: float):
    g = cc.GammaHat
    a1 = cc.A1.at(t)
    a2 = cc.A2.at(t)
    a3 = cc.A3.at(t)
    a = a1 + g @ a3
    b = a2 + a3 @ g
    q = a1 @ g + g @ (a3 @ g) + g @ a2 + cc.B1.at(t)
    return a, b, q, a3


def _finish(cc, grid: Grid, phi: TimeGridFn, method: str) -> RiccatiSolution:
    p_term = cc.Ibar @ cc.PhiHat
    margins = np.empty(grid.steps + 1)
    for m in range(grid.steps + 1):
        t = m * grid.dt
        try:
            zf = ZFactor(cc, phi.node(m), t, context="pivot margin at node %d (t=%.6g)" % (m, t))
        except numkit.SingularMatrixError:
            if cc.special_case:
                margins[m] = 0.0
                continue
            raise
        margins[m] = zf.margin
    term = float(np.max(np.abs(phi.node(grid.steps) - p_term)))
    return RiccatiSolution(
        phi=phi,
        method=method,
        min_pivot_margin=float(margins.min()),
        terminal_check=term,
        pivot_margins=margins,
    )


def solve_direct(cc, grid: Grid, refine: int = 4) -> RiccatiSolution:
    """Backward RK4 of the full Riccati equation from phi(T) = Ibar PhiHat.

    In the special regime the quadratic inverse term is identically zero
    and is skipped; otherwise every evaluation factors W with condition
    monitoring and fails loudly on a breach or on escape to non-finite
    values.
    """
    p_term = cc.Ibar @ cc.PhiHat
    skip = cc.special_case
    g = cc.GammaHat

    def rhs(t, phi):
        a, b, q, a3 = _flow_matrices(cc, t)
        out = -(phi @ a) - b @ phi - phi @ (q @ phi) - a3
        if not skip:
            zf = ZFactor(cc, phi, t, context="Riccati quadratic inverse at t=%.6g" % t)
            cmat = cc.C.at(t)
            num = phi @ cmat + phi @ ((cmat @ g + cc.D1.at(t)) @ phi)
            gmat = zf.gain(num)
            bracket = phi @ (cc.B2.at(t) + g @ cc.B3.at(t)) + cc.B3.at(t)
            out = out + bracket @ gmat
        return out

    phi = numkit.rk4_integrate(rhs, p_term, grid, direction="backward", refine=refine, context="Riccati flow")
    return _finish(cc, grid, phi, "direct")


def solve_fundamental(cc, grid: Grid, refine: int = 4) -> RiccatiSolution:
    """Linear fundamental-pair solve phi = V U^{-1} (special regime only)."""
    if not cc.special_case:
        raise SpecialCaseError("fundamental-pair solve requires B2 = B3 = 0 or C = D1 = 0")
    nx, ny = cc.nx, cc.ny
    uv_term = np.vstack([np.eye(nx), cc.Ibar @ cc.PhiHat])

    def rhs(t, uv):
        a, b, q, a3 = _flow_matrices(cc, t)
        u, v = uv[:nx], uv[nx:]
        return np.vstack([a @ u + q @ v, -(a3 @ u) - b @ v])

    uv = numkit.rk4_integrate(rhs, uv_term, grid, direction="backward", refine=refine, context="fundamental pair flow")
    h = grid.dt / refine
    vals = np.empty((uv.values.shape[0], ny, nx))
    for j, pair in enumerate(uv.values):
        u, v = pair[:nx], pair[nx:]
        x = numkit.solve_linear(u.T, v.T, context="fundamental factor U at t=%.6g" % (j * h))[0]
        vals[j] = x.T
    return _finish(cc, grid, TimeGridFn(vals, grid, refine), "fundamental")


def solve_exponential(cc, grid: Grid, refine: int = 4) -> RiccatiSolution:
    """Closed-form solve via the propagator of the linearized flow.

    Constant coefficients use cumulative products of one matrix exponential
    per fine step; time-varying coefficients integrate the backward
    propagator equation M' = -M Ahat instead.  The invertibility condition
    on the lower-right propagator block is checked at every node (the
    closed form requires its determinant to stay positive).
    """
    if not cc.special_case:
        raise SpecialCaseError("exponential-formula solve requires B2 = B3 = 0 or C = D1 = 0")
    nx, ny = cc.nx, cc.ny
    p0 = cc.Ibar @ cc.PhiHat

    def ahat(t):
        a, b, q, a3 = _flow_matrices(cc, t)
        top = np.hstack([a + q @ p0, q])
        bot = np.hstack([-(p0 @ a + b @ p0 + p0 @ (q @ p0) + a3), -(b + p0 @ q)])
        return np.vstack([top, bot])

    nf = grid.steps * refine
    h = grid.dt / refine
    if cc.constant_dynamics:
        step = numkit.expm(ahat(0.0) * h)
        mats = np.empty((nf + 1, nx + ny, nx + ny))
        mats[nf] = np.eye(nx + ny)
        for j in range(nf - 1, -1, -1):
            mats[j] = mats[j + 1] @ step
    else:

        def mrhs(t, m):
            return -(m @ ahat(t))

        mats = numkit.rk4_integrate(
            mrhs, np.eye(nx + ny), grid, direction="backward", refine=refine, context="propagator flow"
        ).values

    vals = np.empty((nf + 1, ny, nx))
    for j in range(nf + 1):
        e21 = mats[j][nx:, :nx]
        e22 = mats[j][nx:, nx:]
        sign, _ = np.linalg.slogdet(e22)
        if sign <= 0:
            raise DeterminantConditionError(
                "propagator block determinant not positive at node %d (t=%.6g)" % (j, j * h)
            )
        vals[j] = p0 - numkit.solve_linear(e22, e21, context="exponential formula at t=%.6g" % (j * h))[0]
    return _finish(cc, grid, TimeGridFn(vals, grid, refine), "exponential")


_METHODS = {
    "direct": solve_direct,
    "fundamental": solve_fundamental,
    "exponential": solve_exponential,
}


def solve(cc, grid: Grid, method: str = "direct", refine: int = 4) -> RiccatiSolution:
    """Dispatch to one of the named solvers."""
    try:
        fn = _METHODS[method]
    except KeyError:
        raise ValueError("unknown Riccati method %r (want direct, fundamental, or exponential)" % method) from None
    return fn(cc, grid, refine=refine)


def dump_riccati_csv(sol: RiccatiSolution, grid: Grid, path):
    """Write per-node sup-norm of phi and the pivot margin to a CSV file."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "t", "phi_norm", "pivot_margin"])
        for m in range(grid.steps + 1):
            writer.writerow(
                [
                    "%d" % m,
                    "%.17g" % (m * grid.dt),
                    "%.17g" % np.max(np.abs(sol.phi.node(m))),
                    "%.17g" % sol.pivot_margins[m],
                ]
            )
