"""Block assembly of the consistency-condition system and its relatives.

Everything downstream (Riccati solve, offset solve, simulation) operates on
one generic container, :class:`CCMatrices`, describing a linear
forward-backward system

    dx = [A1 x + B1 y + B2 z + fX] dt + [C x + D1 y + D2 z + Sigma0] o dW
    dy = -[A2 y + A3 x + B3 z + fY] dt + Ihat (z o dW)
    x(0) = XiHat + GammaHat y(0),      y(T) = PhiHat x(T) + SigmaHat

where ``o`` routes component j of the diffusion vector onto the Brownian
motion ``noise_idx[j]``.  This module builds three instances of that shape
from a validated :class:`~mflq.model.ModelSpec`:

* :func:`assemble_cc` -- the mean/fluctuation doubling of the stacked
  consistency-condition system.  The one-level stack orders the forward
  processes as K blocks of alpha, then alphat, then Xcheck (3Kn rows), the
  backward processes as beta, betat, Ycheck, vartheta (4Kn rows), and the
  martingale components as gamma, gammat, Zcheck (3Kn rows, mirroring the
  forward layout).  Doubling puts the mean block first, the fluctuation
  block second, so x is 6Kn and y is 8Kn.
* :func:`assemble_agent` -- the per-agent system for one type: forward
  (X_i, q_i), backward (Y_i, p_i), martingale (Z_i, pbar_i), each 2n, with
  the mean-field trajectory entering as affine drift inputs.
* :func:`assemble_expectation` -- the one-level expectation system (3Kn
  forward / 4Kn backward) used by the shooting cross-check.

All placements were transcribed by hand and are pinned entrywise by the
test suite against an independent scalar transcription.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .model import Grid, ModelSpec
from .numkit import MatFn

__all__ = [
    "MeanFieldInputError",
    "CCMatrices",
    "AgentBlocks",
    "AffineInputs",
    "ExpectationSystem",
    "assemble_cc",
    "assemble_cc_frozen",
    "assemble_expectation",
    "assemble_agent",
    "dump_blocks",
    "X_BANDS",
    "Y_BANDS",
    "Z_BANDS",
]

#: forward-side band order of the one-level stack
X_BANDS = ("alpha", "alphat", "Xcheck")
#: backward-side band order
Y_BANDS = ("beta", "betat", "Ycheck", "vartheta")
#: martingale-side band order (mirrors the forward layout)
Z_BANDS = ("gamma", "gammat", "Zcheck")


class MeanFieldInputError(ValueError):
    """A per-agent assembly was given no usable mean-field trajectory."""


@dataclass
class AffineInputs:
    """Optional affine drift inputs: fX enters dx, fY enters the dy bracket."""

    fX: MatFn | None = None
    fY: MatFn | None = None

    def fx_at(self, t: float, dim: int) -> np.ndarray:
        return np.zeros(dim) if self.fX is None else self.fX.at(t)

    def fy_at(self, t: float, dim: int) -> np.ndarray:
        return np.zeros(dim) if self.fY is None else self.fY.at(t)


@dataclass
class CCMatrices:
    """Assembled coefficient container for one forward-backward system.

    ``nx`` is the forward (and martingale) dimension, ``ny`` the backward
    dimension.  ``special_case`` is true when the Riccati correction term
    vanishes identically because either both B2/B3 blocks or both C/D1
    blocks are zero.  ``block_index`` maps component names to row ranges of
    the one-level stack; for the doubled system the mean copy starts at
    offset 0 and the fluctuation copy at ``x_fluct_offset``/``y_fluct_offset``.
    """

    nx: int
    ny: int
    grid: Grid
    A1: MatFn
    A2: MatFn
    A3: MatFn
    B1: MatFn
    B2: MatFn
    B3: MatFn
    C: MatFn
    D1: MatFn
    D2: MatFn
    GammaHat: np.ndarray
    PhiHat: np.ndarray
    Ihat: np.ndarray
    Ibar: np.ndarray
    XiHat: np.ndarray
    SigmaHat: np.ndarray
    Sigma0Hat: MatFn
    noise_idx: np.ndarray
    n_noise: int
    block_index: dict
    constant_dynamics: bool = True
    special_case: bool = False
    doubled: bool = False
    x_fluct_offset: int = 0
    y_fluct_offset: int = 0
    parts: object = field(default=None, repr=False)

    @property
    def square(self) -> bool:
        """True when the backward diffusion lift is the identity."""
        return self.Ihat.shape[0] == self.Ihat.shape[1]

    def x_slice(self, name: str, band: str = "mean") -> slice:
        s = self.block_index[name]
        off = self.x_fluct_offset if band == "fluct" else 0
        return slice(s.start + off, s.stop + off)

    def y_slice(self, name: str, band: str = "mean") -> slice:
        s = self.block_index[name]
        off = self.y_fluct_offset if band == "fluct" else 0
        return slice(s.start + off, s.stop + off)


@dataclass
class AgentBlocks:
    """Per-agent forward-backward system for one type, plus affine inputs."""

    ktype: int
    system: CCMatrices
    affine: AffineInputs


@dataclass
class ExpectationSystem:
    """One-level deterministic expectation system (3Kn forward / 4Kn backward).

    The forward drift is ``A1full Ex + B1 Ey + B2 Ez + fX`` and the backward
    drift bracket is ``A2full Ey + A3full Ex + B3 Ez + fY``; the Ez input is
    supplied externally (reconstructed from the decoupled solve).
    """

    nx: int
    ny: int
    grid: Grid
    A1full: MatFn
    B1: MatFn
    B2: MatFn
    A2full: MatFn
    A3full: MatFn
    B3: MatFn
    GammaBar: np.ndarray
    PhiBar: np.ndarray
    Xi: np.ndarray
    Sigma: np.ndarray
    block_index: dict
    affine: AffineInputs


@dataclass(frozen=True)
class _Bands:
    names: tuple
    K: int
    n: int

    def sl(self, name: str, k: int) -> slice:
        start = (self.names.index(name) * self.K + k) * self.n
        return slice(start, start + self.n)

    @property
    def dim(self) -> int:
        return len(self.names) * self.K * self.n


class _Stack:
    """Evaluates the one-level stacked block matrices at a given time."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n = spec.dims.n
        self.K = spec.dims.K
        self.pi = np.asarray(spec.population.pi, dtype=float)
        self.xb = _Bands(X_BANDS, self.K, self.n)
        self.yb = _Bands(Y_BANDS, self.K, self.n)
        self._coeffs = functools.lru_cache(maxsize=16)(self._coeffs_at)

    def _coeffs_at(self, t: float) -> dict:
        sh = self.spec.shared
        c = {name: getattr(sh, name).at(t) for name in ("B", "D", "F", "Kcoef", "L", "M", "Q", "S")}
        c["A"] = [tp.A.at(t) for tp in self.spec.types]
        c["H"] = [tp.H.at(t) for tp in self.spec.types]
        eye_d = np.eye(self.spec.dims.d)
        c["Rinv"] = [
            numkit.solve_linear(tp.R.at(t), eye_d, context="R inverse for type %d at t=%.6g" % (k + 1, t))[0]
            for k, tp in enumerate(self.spec.types)
        ]
        q, s = c["Q"], c["S"]
        c["QSsym"] = q @ s + s.T @ q - s.T @ q @ s
        return c

    # -- one-level dynamic blocks -------------------------------------------

    def a1(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.xb.sl("alpha", k)] = c["A"][k]
            m[self.xb.sl("alpha", k), self.xb.sl("alphat", k)] = -c["B"] @ c["Rinv"][k] @ c["Kcoef"].T
            m[self.xb.sl("alphat", k), self.xb.sl("alphat", k)] = c["H"][k].T
            m[self.xb.sl("Xcheck", k), self.xb.sl("Xcheck", k)] = c["H"][k].T
        return m

    def a1bar(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.xb.dim))
        for k in range(self.K):
            for l in range(self.K):
                m[self.xb.sl("alpha", k), self.xb.sl("alpha", l)] = c["F"] * self.pi[l]
        return m

    def b1(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.yb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.yb.sl("betat", k)] = -c["B"] @ c["Rinv"][k] @ c["B"].T
        return m

    def b2(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.xb.sl("alphat", k)] = -c["B"] @ c["Rinv"][k] @ c["D"].T
        return m

    def b3(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.yb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.yb.sl("beta", k), self.xb.sl("alphat", k)] = -c["Kcoef"] @ c["Rinv"][k] @ c["D"].T
        return m

    def cmat(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.xb.sl("alphat", k)] = -c["D"] @ c["Rinv"][k] @ c["Kcoef"].T
        return m

    def d1(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.yb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.yb.sl("betat", k)] = -c["D"] @ c["Rinv"][k] @ c["B"].T
        return m

    def d2(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.xb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.xb.sl("alpha", k), self.xb.sl("alphat", k)] = -c["D"] @ c["Rinv"][k] @ c["D"].T
        return m

    def a2(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.yb.dim, self.yb.dim))
        for k in range(self.K):
            m[self.yb.sl("beta", k), self.yb.sl("beta", k)] = c["H"][k]
            m[self.yb.sl("beta", k), self.yb.sl("betat", k)] = -c["Kcoef"] @ c["Rinv"][k] @ c["B"].T
            m[self.yb.sl("betat", k), self.yb.sl("betat", k)] = c["A"][k].T
            m[self.yb.sl("Ycheck", k), self.yb.sl("Ycheck", k)] = c["A"][k].T
            for l in range(self.K):
                m[self.yb.sl("betat", k), self.yb.sl("vartheta", l)] = c["F"].T * self.pi[l]
                m[self.yb.sl("vartheta", k), self.yb.sl("vartheta", l)] = c["F"].T * self.pi[l]
            m[self.yb.sl("vartheta", k), self.yb.sl("vartheta", k)] += c["A"][k].T
        return m

    def a2bar(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.yb.dim, self.yb.dim))
        for k in range(self.K):
            for l in range(self.K):
                m[self.yb.sl("betat", k), self.yb.sl("Ycheck", l)] = c["F"].T * self.pi[l]
                m[self.yb.sl("vartheta", k), self.yb.sl("Ycheck", l)] = c["F"].T * self.pi[l]
        return m

    def a3(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.yb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.yb.sl("beta", k), self.xb.sl("alpha", k)] = c["L"]
            m[self.yb.sl("beta", k), self.xb.sl("alphat", k)] = -c["Kcoef"] @ c["Rinv"][k] @ c["Kcoef"].T
            m[self.yb.sl("betat", k), self.xb.sl("alpha", k)] = c["Q"]
            m[self.yb.sl("betat", k), self.xb.sl("alphat", k)] = c["L"].T
            m[self.yb.sl("Ycheck", k), self.xb.sl("alpha", k)] = c["Q"]
            m[self.yb.sl("Ycheck", k), self.xb.sl("Xcheck", k)] = -c["L"].T
            for l in range(self.K):
                m[self.yb.sl("betat", k), self.xb.sl("Xcheck", l)] = -c["M"].T * self.pi[l]
                m[self.yb.sl("vartheta", k), self.xb.sl("Xcheck", l)] = -c["M"].T * self.pi[l]
        return m

    def a3bar(self, t):
        c = self._coeffs(t)
        m = np.zeros((self.yb.dim, self.xb.dim))
        for k in range(self.K):
            for l in range(self.K):
                m[self.yb.sl("beta", k), self.xb.sl("alpha", l)] = c["M"] * self.pi[l]
                m[self.yb.sl("betat", k), self.xb.sl("alpha", l)] = -c["QSsym"] * self.pi[l]
                m[self.yb.sl("vartheta", k), self.xb.sl("alpha", l)] = -c["QSsym"] * self.pi[l]
        return m

    # -- boundary operators and data vectors --------------------------------

    def phibar(self):
        sh = self.spec.shared
        m = np.zeros((self.yb.dim, self.xb.dim))
        for k in range(self.K):
            m[self.yb.sl("beta", k), self.xb.sl("alpha", k)] = sh.Phi
            m[self.yb.sl("betat", k), self.xb.sl("alphat", k)] = sh.Phi.T
            m[self.yb.sl("Ycheck", k), self.xb.sl("Xcheck", k)] = -sh.Phi.T
        return m

    def gammabar(self):
        sh = self.spec.shared
        m = np.zeros((self.xb.dim, self.yb.dim))
        for k in range(self.K):
            m[self.xb.sl("alphat", k), self.yb.sl("beta", k)] = sh.Gamma
            m[self.xb.sl("Xcheck", k), self.yb.sl("beta", k)] = -sh.Gamma
        return m

    def xi(self):
        v = np.zeros(self.xb.dim)
        for k, tp in enumerate(self.spec.types):
            v[self.xb.sl("alpha", k)] = tp.xi0
        return v

    def sigma_terminal(self):
        v = np.zeros(self.yb.dim)
        for k, tp in enumerate(self.spec.types):
            v[self.yb.sl("beta", k)] = tp.eta
        return v

    def sigma0(self, t):
        v = np.zeros(self.xb.dim)
        for k, tp in enumerate(self.spec.types):
            v[self.xb.sl("alpha", k)] = tp.sigma.at(t)
        return v


def _dynamics_constant(spec: ModelSpec) -> bool:
    shared_const = all(
        getattr(spec.shared, name).is_constant for name in ("B", "D", "F", "Kcoef", "L", "M", "Q", "S")
    )
    type_const = all(tp.A.is_constant and tp.H.is_constant and tp.R.is_constant for tp in spec.types)
    return shared_const and type_const


def _special_case(spec: ModelSpec) -> bool:
    b0 = spec.shared.B.is_zero
    d0 = spec.shared.D.is_zero
    k0 = spec.shared.Kcoef.is_zero
    b2_zero = b0 or d0
    b3_zero = k0 or d0
    c_zero = d0 or k0
    d1_zero = d0 or b0
    return (b2_zero and b3_zero) or (c_zero and d1_zero)


def _wrap(build, constant: bool) -> MatFn:
    if constant:
        return MatFn(constant=build(0.0))
    return MatFn(fn=build)


def _stack_block_index(st: _Stack) -> dict:
    idx = {}
    for k in range(st.K):
        for name in X_BANDS:
            idx["%s_%d" % (name, k + 1)] = st.xb.sl(name, k)
        for name in Y_BANDS:
            idx["%s_%d" % (name, k + 1)] = st.yb.sl(name, k)
    return idx


def _doubled_system(spec: ModelSpec, st: _Stack, with_mixing: bool) -> CCMatrices:
    """Mean/fluctuation doubling; ``with_mixing=False`` drops the blocks that
    couple the mean equations through the population average of alpha (they
    are replaced by affine inputs in the frozen re-solve)."""
    dx, dy = st.xb.dim, st.yb.dim
    nx, ny = 2 * dx, 2 * dy
    const = _dynamics_constant(spec)

    def cal_a1(t):
        m = np.zeros((nx, nx))
        a = st.a1(t)
        m[:dx, :dx] = (a + st.a1bar(t)) if with_mixing else a
        m[dx:, dx:] = a
        return m

    def cal_a2(t):
        m = np.zeros((ny, ny))
        a = st.a2(t)
        m[:dy, :dy] = a + st.a2bar(t)
        m[dy:, dy:] = a
        return m

    def cal_a3(t):
        m = np.zeros((ny, nx))
        a = st.a3(t)
        m[:dy, :dx] = (a + st.a3bar(t)) if with_mixing else a
        m[dy:, dx:] = a
        return m

    def cal_b1(t):
        m = np.zeros((nx, ny))
        b = st.b1(t)
        m[:dx, :dy] = b
        m[dx:, dy:] = b
        return m

    def cal_b2(t):
        m = np.zeros((nx, nx))
        b = st.b2(t)
        m[:dx, :dx] = b
        m[dx:, dx:] = b
        return m

    def cal_b3(t):
        m = np.zeros((ny, nx))
        b = st.b3(t)
        m[:dy, :dx] = b
        m[dy:, dx:] = b
        return m

    def cal_c(t):
        m = np.zeros((nx, nx))
        c = st.cmat(t)
        m[dx:, :dx] = c
        m[dx:, dx:] = c
        return m

    def cal_d1(t):
        m = np.zeros((nx, ny))
        d = st.d1(t)
        m[dx:, :dy] = d
        m[dx:, dy:] = d
        return m

    def cal_d2(t):
        m = np.zeros((nx, nx))
        d = st.d2(t)
        m[dx:, :dx] = d
        m[dx:, dx:] = d
        return m

    ihat = np.zeros((ny, nx))
    ihat[dy : dy + dx, :dx] = np.eye(dx)
    ihat[dy : dy + dx, dx:] = np.eye(dx)

    phibar = st.phibar()
    gammabar = st.gammabar()
    gamma_hat = np.zeros((nx, ny))
    gamma_hat[:dx, :dy] = gammabar
    phi_hat = np.zeros((ny, nx))
    phi_hat[:dy, :dx] = phibar
    phi_hat[dy:, dx:] = phibar
    ibar = np.zeros((ny, ny))
    ibar[:dy, :dy] = numkit.solve_linear(
        np.eye(dy) - phibar @ gammabar, np.eye(dy), context="initial/terminal coupling inverse"
    )[0]
    ibar[dy:, dy:] = np.eye(dy)

    xi_hat = np.concatenate([st.xi(), np.zeros(dx)])
    sigma_hat = np.concatenate([st.sigma_terminal(), np.zeros(dy)])
    sigma_const = all(tp.sigma.is_constant for tp in spec.types)

    def sigma0_hat(t):
        return np.concatenate([np.zeros(dx), st.sigma0(t)])

    n, K = st.n, st.K
    noise_idx = np.array([((j % dx) // n) % K for j in range(nx)], dtype=int)

    return CCMatrices(
        nx=nx,
        ny=ny,
        grid=spec.grid,
        A1=_wrap(cal_a1, const),
        A2=_wrap(cal_a2, const),
        A3=_wrap(cal_a3, const),
        B1=_wrap(cal_b1, const),
        B2=_wrap(cal_b2, const),
        B3=_wrap(cal_b3, const),
        C=_wrap(cal_c, const),
        D1=_wrap(cal_d1, const),
        D2=_wrap(cal_d2, const),
        GammaHat=gamma_hat,
        PhiHat=phi_hat,
        Ihat=ihat,
        Ibar=ibar,
        XiHat=xi_hat,
        SigmaHat=sigma_hat,
        Sigma0Hat=_wrap(sigma0_hat, sigma_const),
        noise_idx=noise_idx,
        n_noise=K,
        block_index=_stack_block_index(st),
        constant_dynamics=const,
        special_case=_special_case(spec),
        doubled=True,
        x_fluct_offset=dx,
        y_fluct_offset=dy,
        parts=st,
    )


def assemble_cc(spec: ModelSpec) -> CCMatrices:
    """Assemble the doubled consistency-condition system (6Kn / 8Kn)."""
    return _doubled_system(spec, _Stack(spec), with_mixing=True)


def assemble_cc_frozen(spec: ModelSpec, xhat) -> tuple[CCMatrices, AffineInputs]:
    """Assemble the doubled system with the population-average coupling frozen.

    ``xhat`` is a TimeGridFn holding the n-dimensional mean trajectory to be
    treated as a known input.  The blocks that feed the average of alpha back
    into the dynamics are dropped and replaced by affine drift inputs, so the
    returned system's own average-of-alpha output can be compared against
    ``xhat`` (the fixed-point residual).  Couplings through vartheta and the
    mean of Ycheck stay live: they are not part of the frozen input.
    """
    st = _Stack(spec)
    _require_grid_coverage(xhat, spec.grid, "frozen mean trajectory")
    cc = _doubled_system(spec, st, with_mixing=False)
    dx, dy = st.xb.dim, st.yb.dim

    def fx(t):
        v = np.zeros(2 * dx)
        fxh = st._coeffs(t)["F"] @ xhat.at(t)
        for k in range(st.K):
            v[st.xb.sl("alpha", k)] = fxh
        return v

    def fy(t):
        v = np.zeros(2 * dy)
        c = st._coeffs(t)
        xh = xhat.at(t)
        mxh = c["M"] @ xh
        qsh = -c["QSsym"] @ xh
        for k in range(st.K):
            v[st.yb.sl("beta", k)] = mxh
            v[st.yb.sl("betat", k)] = qsh
            v[st.yb.sl("vartheta", k)] = qsh
        return v

    return cc, AffineInputs(fX=MatFn(fn=fx), fY=MatFn(fn=fy))


def assemble_expectation(spec: ModelSpec) -> ExpectationSystem:
    """Assemble the one-level expectation system (3Kn forward / 4Kn backward)."""
    st = _Stack(spec)
    const = _dynamics_constant(spec)

    def a1full(t):
        return st.a1(t) + st.a1bar(t)

    def a2full(t):
        return st.a2(t) + st.a2bar(t)

    def a3full(t):
        return st.a3(t) + st.a3bar(t)

    return ExpectationSystem(
        nx=st.xb.dim,
        ny=st.yb.dim,
        grid=spec.grid,
        A1full=_wrap(a1full, const),
        B1=_wrap(st.b1, const),
        B2=_wrap(st.b2, const),
        A2full=_wrap(a2full, const),
        A3full=_wrap(a3full, const),
        B3=_wrap(st.b3, const),
        GammaBar=st.gammabar(),
        PhiBar=st.phibar(),
        Xi=st.xi(),
        Sigma=st.sigma_terminal(),
        block_index=_stack_block_index(st),
        affine=AffineInputs(),
    )


def _require_grid_coverage(traj, grid: Grid, what: str):
    if traj is None:
        raise MeanFieldInputError("%s is missing" % what)
    g = getattr(traj, "grid", None)
    if g is None or abs(g.T - grid.T) > 1e-12 * max(1.0, grid.T) or g.steps != grid.steps:
        raise MeanFieldInputError("%s does not cover the model grid (T=%g, steps=%d)" % (what, grid.T, grid.steps))


def assemble_agent(spec: ModelSpec, ktype: int, mf) -> AgentBlocks:
    """Assemble the 2n/2n per-agent system for 1-based type ``ktype``.

    ``mf`` must expose ``Xhat`` and ``Theta`` TimeGridFns covering the model
    grid; they enter as affine drift inputs (F Xhat on the X-row, M Xhat on
    the Y-row, -Theta on the p-row) while sigma_k rides in the diffusion.
    """
    if not (1 <= ktype <= spec.dims.K):
        raise MeanFieldInputError("type %d outside 1..%d" % (ktype, spec.dims.K))
    _require_grid_coverage(getattr(mf, "Xhat", None), spec.grid, "mean-field trajectory Xhat")
    _require_grid_coverage(getattr(mf, "Theta", None), spec.grid, "mean-field trajectory Theta")
    n = spec.dims.n
    tp = spec.types[ktype - 1]
    sh = spec.shared
    const = _dynamics_constant(spec)
    eye_d = np.eye(spec.dims.d)

    def co(t):
        rinv = numkit.solve_linear(
            tp.R.at(t), eye_d, context="R inverse for type %d at t=%.6g" % (ktype, t)
        )[0]
        return rinv

    def a1(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, :n] = tp.A.at(t)
        m[:n, n:] = -sh.B.at(t) @ co(t) @ sh.Kcoef.at(t).T
        m[n:, n:] = tp.H.at(t).T
        return m

    def b1(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.B.at(t) @ co(t) @ sh.B.at(t).T
        return m

    def b2(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.B.at(t) @ co(t) @ sh.D.at(t).T
        return m

    def cmat(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.D.at(t) @ co(t) @ sh.Kcoef.at(t).T
        return m

    def d1(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.D.at(t) @ co(t) @ sh.B.at(t).T
        return m

    def d2(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.D.at(t) @ co(t) @ sh.D.at(t).T
        return m

    def a2(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, :n] = tp.H.at(t)
        m[:n, n:] = -sh.Kcoef.at(t) @ co(t) @ sh.B.at(t).T
        m[n:, n:] = tp.A.at(t).T
        return m

    def a3(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, :n] = sh.L.at(t)
        m[:n, n:] = -sh.Kcoef.at(t) @ co(t) @ sh.Kcoef.at(t).T
        m[n:, :n] = sh.Q.at(t)
        m[n:, n:] = sh.L.at(t).T
        return m

    def b3(t):
        m = np.zeros((2 * n, 2 * n))
        m[:n, n:] = -sh.Kcoef.at(t) @ co(t) @ sh.D.at(t).T
        return m

    gamma_hat = np.zeros((2 * n, 2 * n))
    gamma_hat[n:, :n] = sh.Gamma
    phi_hat = np.zeros((2 * n, 2 * n))
    phi_hat[:n, :n] = sh.Phi
    phi_hat[n:, n:] = sh.Phi.T
    ibar = numkit.solve_linear(
        np.eye(2 * n) - phi_hat @ gamma_hat, np.eye(2 * n), context="agent boundary coupling inverse"
    )[0]
    xi_hat = np.concatenate([tp.xi0, np.zeros(n)])
    sigma_hat = np.concatenate([tp.eta, np.zeros(n)])

    def sigma0_hat(t):
        return np.concatenate([tp.sigma.at(t), np.zeros(n)])

    system = CCMatrices(
        nx=2 * n,
        ny=2 * n,
        grid=spec.grid,
        A1=_wrap(a1, const),
        A2=_wrap(a2, const),
        A3=_wrap(a3, const),
        B1=_wrap(b1, const),
        B2=_wrap(b2, const),
        B3=_wrap(b3, const),
        C=_wrap(cmat, const),
        D1=_wrap(d1, const),
        D2=_wrap(d2, const),
        GammaHat=gamma_hat,
        PhiHat=phi_hat,
        Ihat=np.eye(2 * n),
        Ibar=ibar,
        XiHat=xi_hat,
        SigmaHat=sigma_hat,
        Sigma0Hat=_wrap(sigma0_hat, tp.sigma.is_constant),
        noise_idx=np.zeros(2 * n, dtype=int),
        n_noise=1,
        block_index={
            "X": slice(0, n),
            "q": slice(n, 2 * n),
            "Y": slice(0, n),
            "p": slice(n, 2 * n),
            "Z": slice(0, n),
            "pbar": slice(n, 2 * n),
        },
        constant_dynamics=const,
        special_case=_special_case(spec),
        doubled=False,
    )

    fxh_zero = sh.F.is_zero
    theta_zero = not np.any(mf.Theta.values)
    mxh_zero = sh.M.is_zero

    if fxh_zero:
        fx_matfn = MatFn(constant=np.zeros(2 * n))
    else:

        def fx(t):
            return np.concatenate([sh.F.at(t) @ mf.Xhat.at(t), np.zeros(n)])

        fx_matfn = MatFn(fn=fx)

    if mxh_zero and theta_zero:
        fy_matfn = MatFn(constant=np.zeros(2 * n))
    else:

        def fy(t):
            return np.concatenate([sh.M.at(t) @ mf.Xhat.at(t), -mf.Theta.at(t)])

        fy_matfn = MatFn(fn=fy)

    return AgentBlocks(ktype=ktype, system=system, affine=AffineInputs(fX=fx_matfn, fY=fy_matfn))


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------

def _write_section(out, name: str, arr: np.ndarray):
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    out.write("[%s] %dx%d\n" % (name, arr.shape[0], arr.shape[1]))
    for row in arr:
        out.write(" ".join("%.17g" % v for v in row))
        out.write("\n")
    out.write("\n")


def dump_blocks(cc: CCMatrices, dest, t: float = 0.0):
    """Write every assembled block at time ``t`` to ``dest`` (path or file).

    One section per block, row-major, plain text; intended for diffing
    against hand calculations.  When the container carries the one-level
    stack (the doubled system does), those blocks are dumped first.
    """
    close = False
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        out = open(dest, "w")
        close = True
    else:
        out = dest
    try:
        out.write("# assembled blocks at t=%.17g\n\n" % t)
        st = cc.parts
        if st is not None:
            for name, fn in (
                ("A1", st.a1),
                ("A1bar", st.a1bar),
                ("B1", st.b1),
                ("B2", st.b2),
                ("B3", st.b3),
                ("C", st.cmat),
                ("D1", st.d1),
                ("D2", st.d2),
                ("A2", st.a2),
                ("A2bar", st.a2bar),
                ("A3", st.a3),
                ("A3bar", st.a3bar),
            ):
                _write_section(out, name, fn(t))
            _write_section(out, "PhiBar", st.phibar())
            _write_section(out, "GammaBar", st.gammabar())
            _write_section(out, "Xi", st.xi())
            _write_section(out, "Sigma", st.sigma_terminal())
            _write_section(out, "Sigma0", st.sigma0(t))
        for name in ("A1", "A2", "A3", "B1", "B2", "B3", "C", "D1", "D2"):
            _write_section(out, "cal" + name, getattr(cc, name).at(t))
        _write_section(out, "GammaHat", cc.GammaHat)
        _write_section(out, "PhiHat", cc.PhiHat)
        _write_section(out, "Ihat", cc.Ihat)
        _write_section(out, "Ibar", cc.Ibar)
        _write_section(out, "XiHat", cc.XiHat)
        _write_section(out, "SigmaHat", cc.SigmaHat)
        _write_section(out, "Sigma0Hat", cc.Sigma0Hat.at(t))
    finally:
        if close:
            out.close()
