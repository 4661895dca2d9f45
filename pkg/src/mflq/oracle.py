"""Brute-force reference solvers for desk-scale ground truth.

Three independent constructions live here, deliberately sharing no code
with the production pipeline so they can arbitrate it:

* an exact social optimizer on a binary scenario tree: each agent's
  Brownian increment is ``+sqrt(dt)`` or ``-sqrt(dt)`` per step, states
  and backward values are propagated as affine functions of every
  node-level control variable, and the social cost becomes an explicit
  convex quadratic minimized through its normal equations;
* a shooting solver for the two-point boundary problem satisfied by the
  stacked expectation system (unknown initial backward value, linear
  terminal condition);
* a classical linear-quadratic feedback solve (symmetric Riccati with
  the control-noise correction) valid on instances with no mean-field,
  backward-initial or adjoint coupling.

Tree discretization conventions, shared with the population simulator:
state transitions are Euler-Maruyama at the tree step, the running
state cost charges the step's right endpoint (weighted ``dt``, with the
coefficient matrices read at the left endpoint), the control cost
charges the left endpoint, and the backward recursion solves the
implicit one-step relation ``(I - dt H) Y_m = E[Y_{m+1} | node] +
dt (K u_m + L X_m + M Xbar_m)``.
"""

from dataclasses import dataclass
import csv

import numpy as np

from . import assembly, numkit
from .model import Grid, ModelSpec
from .numkit import TimeGridFn

__all__ = [
    "TreeSizeError",
    "ConvexityError",
    "BVPSingularError",
    "OracleInputError",
    "TreeSpec",
    "TreeQuadratic",
    "TreeSolution",
    "TreeEvaluation",
    "tree_social_optimum",
    "assemble_tree_cost",
    "cost_of",
    "evaluate_strategy_on_tree",
    "dump_tree_csv",
    "BVPSolution",
    "shoot_bvp",
    "LQFeedback",
    "classical_lq",
]

MAX_TREE_NODES = 2**18
MAX_TREE_VARS = 2048


class TreeSizeError(ValueError):
    """Requested scenario tree exceeds the brute-force bounds."""


class ConvexityError(ArithmeticError):
    """The assembled social cost is not positive definite.

    Under the standing positivity assumptions on the weights this signals
    a modeling or discretization bug, so it is raised loudly instead of
    being regularized away.
    """


class BVPSingularError(ArithmeticError):
    """The boundary matrix of the shooting solve is singular."""


class OracleInputError(ValueError):
    """An oracle was invoked outside its validity regime."""


# ---------------------------------------------------------------------------
# scenario tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeSpec:
    """A binary scenario tree over a tiny population.

    ``steps`` time steps of size ``spec.grid.T / steps``; ``theta`` holds
    the 0-based type of each of the ``N`` agents.  Level ``m`` has
    ``2**(N*m)`` filtration atoms; the children of atom ``a`` are
    ``a * 2**N + code`` where bit ``i`` of ``code`` flips agent ``i``'s
    increment to ``+sqrt(dt)``.
    """

    spec: ModelSpec
    steps: int
    N: int
    theta: tuple

    @property
    def dt(self) -> float:
        return self.spec.grid.T / self.steps


def make_tree(spec: ModelSpec, steps: int, N=None, theta=None) -> TreeSpec:
    """Validate bounds and build a :class:`TreeSpec`."""
    N = spec.dims.N if N is None else int(N)
    if not 1 <= N <= 3:
        raise TreeSizeError("tree supports 1..3 agents, got %d" % N)
    if not 1 <= steps <= 6:
        raise TreeSizeError("tree supports 1..6 steps, got %d" % steps)
    if theta is None:
        if len(spec.population.theta) < N:
            raise TreeSizeError(
                "population lists %d agents, tree wants %d" % (len(spec.population.theta), N)
            )
        theta = tuple(int(v) for v in spec.population.theta[:N])
    else:
        theta = tuple(int(v) for v in theta)
        if len(theta) != N:
            raise TreeSizeError("theta must list one type per agent")
    if any(not 0 <= v < spec.dims.K for v in theta):
        raise TreeSizeError("theta entries must be 0-based types below K=%d" % spec.dims.K)
    nodes = sum(2 ** (N * m) for m in range(steps + 1))
    if nodes > MAX_TREE_NODES:
        raise TreeSizeError("tree has %d nodes, limit %d" % (nodes, MAX_TREE_NODES))
    tree = TreeSpec(spec=spec, steps=steps, N=N, theta=theta)
    if _layout(tree).nvars > MAX_TREE_VARS:
        raise TreeSizeError(
            "tree has %d control variables, limit %d" % (_layout(tree).nvars, MAX_TREE_VARS)
        )
    return tree


@dataclass(frozen=True)
class TreeLayout:
    """Flat indexing of the per-node control variables."""

    steps: int
    N: int
    d: int
    atoms: tuple  # atoms per level, len steps + 1
    offsets: tuple  # variable offset per level, len steps

    @property
    def nvars(self) -> int:
        return self.offsets[-1] + self.atoms[self.steps - 1] * self.N * self.d

    def u_slice(self, m: int, atom: int, agent: int) -> slice:
        base = self.offsets[m] + (atom * self.N + agent) * self.d
        return slice(base, base + self.d)

    def level_controls(self, u: np.ndarray, m: int) -> np.ndarray:
        """View of the level-``m`` controls with shape (atoms, N, d)."""
        lo = self.offsets[m]
        width = self.atoms[m] * self.N * self.d
        return np.asarray(u)[lo : lo + width].reshape(self.atoms[m], self.N, self.d)


def _layout(tree: TreeSpec) -> TreeLayout:
    d = tree.spec.dims.d
    atoms = tuple(2 ** (tree.N * m) for m in range(tree.steps + 1))
    offsets = []
    off = 0
    for m in range(tree.steps):
        offsets.append(off)
        off += atoms[m] * tree.N * d
    return TreeLayout(steps=tree.steps, N=tree.N, d=d, atoms=atoms, offsets=tuple(offsets))


def _signs(N: int, dt: float) -> np.ndarray:
    """Increment signs per child code, shape (2**N, N), entries +-sqrt(dt)."""
    codes = np.arange(2**N)
    bits = (codes[:, None] >> np.arange(N)[None, :]) & 1
    return np.sqrt(dt) * (2.0 * bits - 1.0)


@dataclass
class TreeQuadratic:
    """The social cost as an explicit quadratic ``u -> 0.5 u'Gu + g'u + c``."""

    gram: np.ndarray
    lin: np.ndarray
    const: float
    layout: TreeLayout

    def cost(self, u) -> float:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.layout.nvars,):
            raise OracleInputError(
                "control vector must have %d entries, got shape %r" % (self.layout.nvars, u.shape)
            )
        return float(0.5 * u @ self.gram @ u + self.lin @ u + self.const)


@dataclass
class TreeSolution:
    u_star: np.ndarray
    J_star: float
    quadratic: TreeQuadratic
    layout: TreeLayout
    normal_residual: float


@dataclass
class TreeEvaluation:
    J: float
    per_agent: np.ndarray
    Y0: np.ndarray
    controls: np.ndarray  # flat vector in layout order


def _tree_coeffs(tree: TreeSpec, m: int):
    """Coefficients read at the left endpoint of step ``m``."""
    spec = tree.spec
    t = m * tree.dt
    sh = spec.shared
    per_type = []
    for k in tree.theta:
        tp = spec.types[k]
        per_type.append(
            {
                "A": tp.A.at(t),
                "H": tp.H.at(t),
                "R": tp.R.at(t),
                "sigma": tp.sigma.at(t),
            }
        )
    return {
        "t": t,
        "types": per_type,
        "B": sh.B.at(t),
        "D": sh.D.at(t),
        "F": sh.F.at(t),
        "K": sh.Kcoef.at(t),
        "L": sh.L.at(t),
        "M": sh.M.at(t),
        "Q": sh.Q.at(t),
        "S": sh.S.at(t),
    }


def _forward_affine(tree: TreeSpec, layout: TreeLayout):
    """Propagate states as affine maps of the flat control vector.

    Returns per-level lists ``base[m]`` of shape (atoms, N, n) and
    ``sens[m]`` of shape (atoms, N, n, nvars).
    """
    spec = tree.spec
    n = spec.dims.n
    d = spec.dims.d
    N = tree.N
    nvars = layout.nvars
    dt = tree.dt
    signs = _signs(N, dt)

    base = [np.empty((1, N, n))]
    for i, k in enumerate(tree.theta):
        base[0][0, i] = spec.types[k].xi0
    sens = [np.zeros((1, N, n, nvars))]

    for m in range(tree.steps):
        co = _tree_coeffs(tree, m)
        atoms = layout.atoms[m]
        xb, xs = base[m], sens[m]
        xbarb = xb.mean(axis=1)  # (atoms, n)
        xbars = xs.mean(axis=1)  # (atoms, n, nvars)

        drift_b = np.empty_like(xb)
        drift_s = np.empty_like(xs)
        diff_b = np.empty_like(xb)
        diff_s = np.zeros_like(xs)
        for i in range(N):
            amat = co["types"][i]["A"]
            drift_b[:, i] = xb[:, i] @ amat.T + xbarb @ co["F"].T
            drift_s[:, i] = np.einsum("rc,acv->arv", amat, xs[:, i], optimize=False)
            drift_s[:, i] += np.einsum("rc,acv->arv", co["F"], xbars, optimize=False)
            diff_b[:, i] = co["types"][i]["sigma"]
            for a in range(atoms):
                usl = layout.u_slice(m, a, i)
                drift_s[a, i, :, usl] += co["B"]
                diff_s[a, i, :, usl] += co["D"]

        nb = np.empty((atoms * 2**N, N, n))
        ns = np.empty((atoms * 2**N, N, n, nvars))
        for code in range(2**N):
            # child rows are a * 2**N + code
            child_b = xb + dt * drift_b + signs[code][None, :, None] * diff_b
            child_s = xs + dt * drift_s + signs[code][None, :, None, None] * diff_s
            nb[code :: 2**N] = child_b
            ns[code :: 2**N] = child_s
        base.append(nb)
        sens.append(ns)
    return base, sens


def _backward_y0(tree: TreeSpec, layout: TreeLayout, base, sens):
    """Affine map of the initial backward values, per agent.

    Returns ``(y0_base, y0_sens)`` with shapes (N, n) and (N, n, nvars).
    """
    spec = tree.spec
    n = spec.dims.n
    N = tree.N
    nvars = layout.nvars
    dt = tree.dt
    phi = spec.shared.Phi

    yb = np.empty_like(base[-1])
    ys = np.empty_like(sens[-1])
    for i, k in enumerate(tree.theta):
        yb[:, i] = base[-1][:, i] @ phi.T + spec.types[k].eta
        ys[:, i] = np.einsum("rc,acv->arv", phi, sens[-1][:, i], optimize=False)

    eye = np.eye(n)
    for m in range(tree.steps - 1, -1, -1):
        co = _tree_coeffs(tree, m)
        atoms = layout.atoms[m]
        xb, xs = base[m], sens[m]
        xbarb = xb.mean(axis=1)
        xbars = xs.mean(axis=1)
        # conditional expectation over the 2**N children of each atom
        eb = yb.reshape(atoms, 2**N, N, n).mean(axis=1)
        es = ys.reshape(atoms, 2**N, N, n, nvars).mean(axis=1)
        nyb = np.empty((atoms, N, n))
        nys = np.empty((atoms, N, n, nvars))
        for i in range(N):
            rest_b = xb[:, i] @ co["L"].T + xbarb @ co["M"].T
            rest_s = np.einsum("rc,acv->arv", co["L"], xs[:, i], optimize=False)
            rest_s += np.einsum("rc,acv->arv", co["M"], xbars, optimize=False)
            for a in range(atoms):
                usl = layout.u_slice(m, a, i)
                rest_s[a, :, usl] += co["K"]
            factor = eye - dt * co["types"][i]["H"]
            rhs_b = eb[:, i] + dt * rest_b
            rhs_s = es[:, i] + dt * rest_s
            try:
                nyb[:, i] = np.linalg.solve(factor, rhs_b.T).T
                nys[:, i] = np.linalg.solve(
                    factor, rhs_s.transpose(1, 0, 2).reshape(n, -1)
                ).reshape(n, atoms, nvars).transpose(1, 0, 2)
            except np.linalg.LinAlgError:
                raise numkit.SingularMatrixError(
                    "backward recursion factor singular at step %d" % m
                )
        yb, ys = nyb, nys
    return yb[0], ys[0]


def assemble_tree_cost(tree: TreeSpec) -> TreeQuadratic:
    """Accumulate the social cost as an explicit quadratic in the controls."""
    spec = tree.spec
    layout = _layout(tree)
    if layout.nvars > MAX_TREE_VARS:
        raise TreeSizeError(
            "tree has %d control variables, limit %d" % (layout.nvars, MAX_TREE_VARS)
        )
    n = spec.dims.n
    N = tree.N
    nvars = layout.nvars
    dt = tree.dt

    base, sens = _forward_affine(tree, layout)
    gram = np.zeros((nvars, nvars))
    lin = np.zeros(nvars)
    const = 0.0

    for m in range(tree.steps):
        co = _tree_coeffs(tree, m)
        # control cost at the left endpoint
        w_ctrl = dt * 2.0 ** (-tree.N * m)
        for i in range(N):
            rmat = co["types"][i]["R"]
            for a in range(layout.atoms[m]):
                usl = layout.u_slice(m, a, i)
                gram[usl, usl] += w_ctrl * rmat
        # state cost at the right endpoint, coefficients from the left
        xb, xs = base[m + 1], sens[m + 1]
        xbarb = xb.mean(axis=1)
        xbars = xs.mean(axis=1)
        w_state = dt * 2.0 ** (-tree.N * (m + 1))
        for i in range(N):
            vb = xb[:, i] - xbarb @ co["S"].T
            vs = xs[:, i] - np.einsum("rc,acv->arv", co["S"], xbars, optimize=False)
            qv_b = vb @ co["Q"].T
            qv_s = np.einsum("rc,acv->arv", co["Q"], vs, optimize=False)
            flat_v = vs.reshape(-1, nvars)
            flat_q = qv_s.reshape(-1, nvars)
            gram += w_state * (flat_v.T @ flat_q)
            lin += w_state * (flat_v.T @ qv_b.ravel())
            const += 0.5 * w_state * float(np.sum(vb * qv_b))

    gamma = spec.shared.Gamma
    if np.any(gamma):
        y0b, y0s = _backward_y0(tree, layout, base, sens)
        for i in range(N):
            gv_b = gamma @ y0b[i]
            gv_s = gamma @ y0s[i]
            gram += y0s[i].T @ gv_s
            lin += y0s[i].T @ gv_b
            const += 0.5 * float(y0b[i] @ gv_b)

    gram = 0.5 * (gram + gram.T)
    return TreeQuadratic(gram=gram, lin=lin, const=const, layout=layout)


def tree_social_optimum(tree: TreeSpec) -> TreeSolution:
    """Exact minimizer of the discrete social cost over adapted controls."""
    quad = assemble_tree_cost(tree)
    try:
        np.linalg.cholesky(quad.gram)
    except np.linalg.LinAlgError:
        raise ConvexityError("social cost quadratic is not positive definite")
    u_star = np.linalg.solve(quad.gram, -quad.lin)
    residual = float(np.max(np.abs(quad.gram @ u_star + quad.lin)))
    scale = max(float(np.max(np.abs(quad.lin))), 1e-300)
    if residual > 1e-10 * max(scale, 1.0):
        raise ConvexityError(
            "normal equations residual %.3g exceeds 1e-10 of the data scale" % residual
        )
    j_star = quad.const + 0.5 * float(quad.lin @ u_star)
    return TreeSolution(
        u_star=u_star,
        J_star=j_star,
        quadratic=quad,
        layout=quad.layout,
        normal_residual=residual,
    )


def cost_of(tree: TreeSpec, controls) -> float:
    """Social cost of an explicit adapted control vector."""
    return assemble_tree_cost(tree).cost(controls)


def evaluate_strategy_on_tree(tree: TreeSpec, gains, offsets) -> TreeEvaluation:
    """Exact tree expectation of the cost under per-agent state feedback.

    ``gains[i]`` has shape (steps, d, n) and ``offsets[i]`` (steps, d);
    agent ``i`` plays ``u_i = gains[i][m] X_i + offsets[i][m]`` at every
    level-``m`` atom.  The controls depend on the agent's own simulated
    state only, so they are adapted by construction.
    """
    spec = tree.spec
    layout = _layout(tree)
    n = spec.dims.n
    N = tree.N
    dt = tree.dt
    signs = _signs(N, dt)
    if len(gains) != N or len(offsets) != N:
        raise OracleInputError("need one gain and offset table per agent")

    xb = np.empty((1, N, n))
    for i, k in enumerate(tree.theta):
        xb[0, i] = spec.types[k].xi0
    levels = [xb]
    u_flat = np.empty(layout.nvars)
    ctrl_cost = np.zeros(N)
    state_cost = np.zeros(N)

    for m in range(tree.steps):
        co = _tree_coeffs(tree, m)
        atoms = layout.atoms[m]
        xb = levels[m]
        xbarb = xb.mean(axis=1)
        w_ctrl = dt * 2.0 ** (-tree.N * m)
        u_here = np.empty((atoms, N, spec.dims.d))
        for i in range(N):
            u_here[:, i] = xb[:, i] @ np.asarray(gains[i][m]).T + np.asarray(offsets[i][m])
            rmat = co["types"][i]["R"]
            ctrl_cost[i] += w_ctrl * float(np.sum((u_here[:, i] @ rmat) * u_here[:, i]))
            for a in range(atoms):
                u_flat[layout.u_slice(m, a, i)] = u_here[a, i]
        nb = np.empty((atoms * 2**N, N, n))
        for i in range(N):
            amat = co["types"][i]["A"]
            drift = xb[:, i] @ amat.T + u_here[:, i] @ co["B"].T + xbarb @ co["F"].T
            diff = u_here[:, i] @ co["D"].T + co["types"][i]["sigma"]
            for code in range(2**N):
                nb[code :: 2**N, i] = xb[:, i] + dt * drift + signs[code, i] * diff
        levels.append(nb)
        xbar_next = nb.mean(axis=1)
        w_state = dt * 2.0 ** (-tree.N * (m + 1))
        for i in range(N):
            v = nb[:, i] - xbar_next @ co["S"].T
            state_cost[i] += w_state * float(np.sum((v @ co["Q"].T) * v))

    # backward values under the fixed controls
    phi = spec.shared.Phi
    yb = np.empty_like(levels[-1])
    for i, k in enumerate(tree.theta):
        yb[:, i] = levels[-1][:, i] @ phi.T + spec.types[k].eta
    eye = np.eye(n)
    for m in range(tree.steps - 1, -1, -1):
        co = _tree_coeffs(tree, m)
        atoms = layout.atoms[m]
        xb = levels[m]
        xbarb = xb.mean(axis=1)
        eb = yb.reshape(atoms, 2**N, N, n).mean(axis=1)
        nyb = np.empty((atoms, N, n))
        for i in range(N):
            u_here = u_flat[layout.offsets[m] : layout.offsets[m] + atoms * N * spec.dims.d]
            u_here = u_here.reshape(atoms, N, spec.dims.d)[:, i]
            rest = u_here @ co["K"].T + xb[:, i] @ co["L"].T + xbarb @ co["M"].T
            factor = eye - dt * co["types"][i]["H"]
            nyb[:, i] = np.linalg.solve(factor, (eb[:, i] + dt * rest).T).T
        yb = nyb
    y0 = yb[0]

    gamma = spec.shared.Gamma
    per_agent = 0.5 * (state_cost + ctrl_cost)
    for i in range(N):
        per_agent[i] += 0.5 * float(y0[i] @ gamma @ y0[i])
    return TreeEvaluation(
        J=float(per_agent.sum()), per_agent=per_agent, Y0=y0, controls=u_flat
    )


def dump_tree_csv(tree: TreeSpec, sol: TreeSolution, path) -> None:
    """Write the optimal control table, one row per (level, atom, agent)."""
    d = tree.spec.dims.d
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["level", "atom", "agent", "t", "J_star"] + ["u_%d" % (j + 1) for j in range(d)]
        )
        for m in range(tree.steps):
            t = m * tree.dt
            for a in range(sol.layout.atoms[m]):
                for i in range(tree.N):
                    u = sol.u_star[sol.layout.u_slice(m, a, i)]
                    writer.writerow(
                        ["%d" % m, "%d" % a, "%d" % (i + 1), "%.17g" % t, "%.17g" % sol.J_star]
                        + ["%.17g" % v for v in u]
                    )


# ---------------------------------------------------------------------------
# shooting solve of the expectation boundary problem
# ---------------------------------------------------------------------------

@dataclass
class BVPSolution:
    EX: TimeGridFn
    EY: TimeGridFn
    y0: np.ndarray
    boundary_cond: float


def shoot_bvp(es, ez=None, refine: int = 4) -> BVPSolution:
    """Solve the stacked expectation system by linear shooting.

    ``es`` comes from the expectation-system assembler; ``ez`` optionally
    supplies the martingale-mean forcing as a table over the same grid
    (zero when omitted).  The initial backward value is the unknown: the
    joint linear flow is propagated once for the homogeneous directions
    and once for the inhomogeneity, and the terminal coupling becomes a
    square linear system.
    """
    grid = es.grid
    nx, ny = es.nx, es.ny
    nw = nx + ny

    def ez_at(t):
        return ez.at(t) if ez is not None else np.zeros(nx)

    def big_a(t):
        out = np.zeros((nw, nw))
        out[:nx, :nx] = es.A1full.at(t)
        out[:nx, nx:] = es.B1.at(t)
        out[nx:, :nx] = -es.A3full.at(t)
        out[nx:, nx:] = -es.A2full.at(t)
        return out

    def forcing(t):
        zmean = ez_at(t)
        out = np.empty(nw)
        out[:nx] = es.B2.at(t) @ zmean + es.affine.fx_at(t, nx)
        out[nx:] = -(es.B3.at(t) @ zmean + es.affine.fy_at(t, ny))
        return out

    fund = numkit.fundamental(big_a, 0, grid, refine=refine)
    part = numkit.rk4_integrate(
        lambda t, w: big_a(t) @ w + forcing(t),
        np.zeros(nw),
        grid,
        direction="forward",
        refine=refine,
        context="expectation shooting",
    )
    ft = fund.values[-1]
    pt = part.values[-1]

    base0 = np.concatenate([es.Xi, np.zeros(ny)])
    dir0 = np.vstack([es.GammaBar, np.eye(ny)])  # d w(0) / d y0
    wt_base = ft @ base0 + pt
    wt_dir = ft @ dir0
    bnd = wt_dir[nx:] - es.PhiBar @ wt_dir[:nx]
    rhs = es.Sigma - (wt_base[nx:] - es.PhiBar @ wt_base[:nx])
    try:
        y0, cond = numkit.solve_linear(bnd, rhs)
    except numkit.SingularMatrixError as exc:
        raise BVPSingularError("boundary matrix is singular: %s" % exc)

    w0 = base0 + dir0 @ y0
    w = fund.values @ w0 + part.values
    return BVPSolution(
        EX=TimeGridFn(w[:, :nx].copy(), grid, refine),
        EY=TimeGridFn(w[:, nx:].copy(), grid, refine),
        y0=y0,
        boundary_cond=cond,
    )


# ---------------------------------------------------------------------------
# classical linear-quadratic feedback
# ---------------------------------------------------------------------------

@dataclass
class LQFeedback:
    P: TimeGridFn
    b: TimeGridFn
    gain: TimeGridFn
    offset: TimeGridFn


def _require_zero(mat, grid, name):
    ts = numkit.grid_times(grid, 2)
    for t in ts:
        if np.any(mat.at(t)):
            raise OracleInputError(
                "classical feedback needs %s = 0 (nonzero at t=%.6g)" % (name, t)
            )


def classical_lq(spec: ModelSpec, ktype: int = 1, grid=None, refine: int = 4) -> LQFeedback:
    """Standalone feedback solve for instances with no cross coupling.

    Valid when the mean-field channels (``F``, ``M``, ``S``), the adjoint
    channels (``L``, ``Kcoef``) and the boundary couplings (``Gamma``,
    ``Phi``) all vanish: the problem then splits into independent
    single-agent problems whose optimal control is linear state feedback
    ``u = -(R + D'PD)^{-1} (B'P x + B'b + D'P sigma)`` with ``P`` the
    symmetric Riccati solution and ``b`` its affine companion.
    """
    grid = spec.grid if grid is None else grid
    if not 1 <= ktype <= spec.dims.K:
        raise OracleInputError("ktype must be 1..%d, got %d" % (spec.dims.K, ktype))
    sh = spec.shared
    _require_zero(sh.F, grid, "F")
    _require_zero(sh.M, grid, "M")
    _require_zero(sh.S, grid, "S")
    _require_zero(sh.L, grid, "L")
    _require_zero(sh.Kcoef, grid, "Kcoef")
    if np.any(sh.Gamma):
        raise OracleInputError("classical feedback needs Gamma = 0")
    if np.any(sh.Phi):
        raise OracleInputError("classical feedback needs Phi = 0")

    tp = spec.types[ktype - 1]
    n, d = spec.dims.n, spec.dims.d

    def unpack(state):
        return state[: n * n].reshape(n, n), state[n * n :]

    def lam_of(pmat, t):
        dmat = sh.D.at(t)
        rmat = tp.R.at(t)
        lam = np.linalg.inv(rmat + dmat.T @ pmat @ dmat)
        return lam, dmat

    def rhs(t, state):
        pmat, bvec = unpack(state)
        amat = tp.A.at(t)
        bmat = sh.B.at(t)
        qmat = sh.Q.at(t)
        lam, dmat = lam_of(pmat, t)
        pb = pmat @ bmat
        dp = -(amat.T @ pmat + pmat @ amat + qmat - pb @ lam @ pb.T)
        db = -((amat.T - pb @ lam @ bmat.T) @ bvec - pb @ lam @ dmat.T @ pmat @ tp.sigma.at(t))
        return np.concatenate([dp.ravel(), db])

    terminal = np.zeros(n * n + n)
    sol = numkit.rk4_integrate(
        rhs, terminal, grid, direction="backward", refine=refine, context="classical feedback"
    )
    nodes = sol.values.shape[0]
    ts = numkit.grid_times(grid, refine)
    pvals = np.empty((nodes, n, n))
    bvals = np.empty((nodes, n))
    gvals = np.empty((nodes, d, n))
    ovals = np.empty((nodes, d))
    for m, t in enumerate(ts):
        pmat, bvec = unpack(sol.values[m])
        pmat = 0.5 * (pmat + pmat.T)
        lam, dmat = lam_of(pmat, t)
        bmat = sh.B.at(t)
        pvals[m] = pmat
        bvals[m] = bvec
        gvals[m] = -lam @ bmat.T @ pmat
        ovals[m] = -lam @ (bmat.T @ bvec + dmat.T @ pmat @ tp.sigma.at(t))
    return LQFeedback(
        P=TimeGridFn(pvals, grid, refine),
        b=TimeGridFn(bvals, grid, refine),
        gain=TimeGridFn(gvals, grid, refine),
        offset=TimeGridFn(ovals, grid, refine),
    )
