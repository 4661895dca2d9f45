"""Dense linear-algebra and integration primitives.

Everything in this module is deliberately small and explicit: a matrix
exponential (scaling and squaring with Pade approximants), classical RK4
integration of vector/matrix ODEs on a uniform grid, fundamental solution
matrices, and linear solves with a condition estimate.  The rest of the
package builds on these four primitives; none of them know anything about
the control problem.

Grids are uniform.  Any object with ``T``, ``steps`` and ``dt`` attributes
is accepted where a grid is expected (see :class:`mflq.model.Grid`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SingularMatrixError",
    "NonFiniteError",
    "TimeGridFn",
    "MatFn",
    "grid_times",
    "expm",
    "rk4_integrate",
    "fundamental",
    "solve_linear",
]

#: condition-number threshold beyond which a matrix is declared singular
COND_LIMIT = 1e12


class SingularMatrixError(np.linalg.LinAlgError):
    """A linear solve hit a singular or numerically singular matrix."""


class NonFiniteError(ArithmeticError):
    """An integration produced a non-finite value (blow-up)."""


def grid_times(grid, refine: int = 1) -> np.ndarray:
    """Return the ``refine * steps + 1`` node times of a uniform grid."""
    m = int(grid.steps) * int(refine)
    return np.linspace(0.0, float(grid.T), m + 1)


@dataclass
class TimeGridFn:
    """A matrix- or vector-valued function stored at uniform grid nodes.

    Parameters
    ----------
    values : ndarray, shape (refine * steps + 1, ...)
        Node values.  With ``refine == 1`` this is one entry per grid node,
        the layout promised to downstream consumers; larger ``refine``
        stores intermediate nodes as well (used by the solvers so that RK4
        stage times fall on stored nodes).
    grid : object
        The grid the values refer to (``T``, ``steps``, ``dt``).
    refine : int
        Subdivision factor of each grid cell.
    """

    values: np.ndarray
    grid: object
    refine: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.grid.steps * self.refine + 1
        if self.values.shape[0] != expected:
            raise ValueError(
                "TimeGridFn needs %d node values, got %d" % (expected, self.values.shape[0])
            )
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("TimeGridFn contains non-finite entries")

    @property
    def h(self) -> float:
        """Spacing between stored nodes."""
        return self.grid.dt / self.refine

    def node(self, m: int) -> np.ndarray:
        """Value at coarse grid node ``m`` (0 .. steps)."""
        return self.values[m * self.refine]

    def index_of(self, t: float) -> int:
        """Stored-node index nearest to ``t`` (must lie on a stored node)."""
        pos = t / self.h
        j = int(round(pos))
        if abs(pos - j) > 1e-9 * max(1.0, abs(pos)):
            raise ValueError("time %r is not a stored node" % (t,))
        return min(max(j, 0), self.values.shape[0] - 1)

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored nodes; clamped to [0, T]."""
        pos = t / self.h
        nmax = self.values.shape[0] - 1
        if pos <= 0.0:
            return self.values[0]
        if pos >= nmax:
            return self.values[nmax]
        j = int(math.floor(pos))
        w = pos - j
        if w == 0.0:
            return self.values[j]
        return (1.0 - w) * self.values[j] + w * self.values[j + 1]


@dataclass
class MatFn:
    """Time-dependent coefficient: constant, tabulated, or callable.

    Tabulated coefficients follow the left-endpoint piecewise-constant
    convention: the value on cell ``[m dt, (m+1) dt)`` is ``table[m]``, and
    ``t == T`` uses the last cell.  Callable coefficients are evaluated
    exactly (this is what makes RK4 fourth-order on analytic data).
    """

    constant: np.ndarray | None = None
    table: np.ndarray | None = None
    fn: object = None
    grid: object = None
    _zero: bool = field(default=False, init=False)

    def __post_init__(self):
        given = sum(x is not None for x in (self.constant, self.table, self.fn))
        if given != 1:
            raise ValueError("MatFn takes exactly one of constant/table/fn")
        if self.constant is not None:
            self.constant = np.asarray(self.constant, dtype=float)
            self._zero = not np.any(self.constant)
        if self.table is not None:
            self.table = np.asarray(self.table, dtype=float)
            if self.grid is None:
                raise ValueError("tabulated MatFn needs a grid")
            if self.table.shape[0] != self.grid.steps:
                raise ValueError(
                    "table needs one entry per grid cell (%d), got %d"
                    % (self.grid.steps, self.table.shape[0])
                )
            self._zero = not np.any(self.table)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    @property
    def is_zero(self) -> bool:
        """True if the coefficient is identically zero (constant/tabulated)."""
        return self._zero

    def at(self, t: float) -> np.ndarray:
        if self.constant is not None:
            return self.constant
        if self.table is not None:
            m = int(math.floor(t / self.grid.dt + 1e-12))
            m = min(max(m, 0), self.grid.steps - 1)
            return self.table[m]
        return np.asarray(self.fn(t), dtype=float)


# ---------------------------------------------------------------------------
# matrix exponential
# ---------------------------------------------------------------------------

_PADE_B = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (
        17643225600.0,
        8821612800.0,
        2075673600.0,
        302702400.0,
        30270240.0,
        2162160.0,
        110880.0,
        3960.0,
        90.0,
        1.0,
    ),
    13: (
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ),
}

_PADE_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}


def _pade_small(a: np.ndarray, m: int) -> np.ndarray:
    b = _PADE_B[m]
    n = a.shape[0]
    ident = np.eye(n)
    powers = {0: ident, 2: a @ a}
    for k in range(4, m + 1, 2):
        powers[k] = powers[k - 2] @ powers[2]
    u = b[1] * ident
    v = b[0] * ident
    for k in range(2, m + 1, 2):
        u = u + b[k + 1] * powers[k]
        v = v + b[k] * powers[k]
    u = a @ u
    return np.linalg.solve(v - u, v + u)


def _pade13(a: np.ndarray) -> np.ndarray:
    b = _PADE_B[13]
    n = a.shape[0]
    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    return np.linalg.solve(v - u, v + u)


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with Pade approximants.

    Uses the standard degree-13 diagonal Pade approximant with the usual
    lower-degree shortcuts for small norms.  Relative accuracy is well below
    1e-12 for 1-norms up to 10, which covers every matrix this package feeds
    it (verified against an independent implementation in the test suite).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expm needs a square matrix, got shape %r" % (a.shape,))
    if not np.all(np.isfinite(a)):
        raise ValueError("expm needs finite entries")
    norm = np.linalg.norm(a, 1)
    for m in (3, 5, 7, 9):
        if norm <= _PADE_THETA[m]:
            return _pade_small(a, m)
    s = max(0, int(math.ceil(math.log2(norm / _PADE_THETA[13]))))
    r = _pade13(a / (2.0**s))
    for _ in range(s):
        r = r @ r
    return r


# ---------------------------------------------------------------------------
# RK4 and fundamental matrices
# ---------------------------------------------------------------------------

def rk4_integrate(rhs, y0, grid, direction: str = "forward", refine: int = 1, context: str = ""):
    """Classical RK4 on a uniform grid, storing every (refined) node.

    ``rhs(t, y)`` must return an array of ``y``'s shape.  Backward
    integration runs the time-reversed system from ``T`` down to 0; the
    returned :class:`TimeGridFn` is always indexed by ascending time, so
    ``out.values[0]`` is the value at ``t = 0`` in both directions.

    Raises :class:`NonFiniteError` naming the first bad node if the
    trajectory stops being finite.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    y0 = np.asarray(y0, dtype=float)
    m = grid.steps * refine
    h = grid.dt / refine
    out = np.empty((m + 1,) + y0.shape)
    ts = grid_times(grid, refine)

    if direction == "forward":
        idx = range(m)
        sgn = 1.0
        out[0] = y0
    else:
        idx = range(m, 0, -1)
        sgn = -1.0
        out[m] = y0

    y = y0
    # escapes are detected and reported below, so intermediate overflow in
    # the stage arithmetic must not warn
    with np.errstate(over="ignore", invalid="ignore"):
        for j in idx:
            t = ts[j]
            k1 = rhs(t, y)
            k2 = rhs(t + sgn * h / 2.0, y + sgn * (h / 2.0) * k1)
            k3 = rhs(t + sgn * h / 2.0, y + sgn * (h / 2.0) * k2)
            k4 = rhs(t + sgn * h, y + sgn * h * k3)
            y = y + sgn * (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            tgt = j + 1 if direction == "forward" else j - 1
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(
                    "non-finite value at t=%.6g (node %d)%s"
                    % (ts[tgt], tgt, " in " + context if context else "")
                )
            out[tgt] = y
    return TimeGridFn(out, grid, refine)


def fundamental(afn, s: int, grid, refine: int = 1) -> TimeGridFn:
    """Fundamental matrix Psi(t, t_s): dPsi/dt = A(t) Psi, Psi(t_s, t_s) = I.

    ``afn`` is a callable ``t -> matrix`` (a :class:`MatFn` works).  ``s``
    is a coarse grid node index.  Nodes before ``t_s`` hold the identity
    (they are outside the domain of Psi(., t_s) and never consumed).
    """
    if not (0 <= s <= grid.steps):
        raise ValueError("node %d outside grid 0..%d" % (s, grid.steps))
    a0 = np.asarray(afn(0.0), dtype=float)
    n = a0.shape[0]
    m = grid.steps * refine
    h = grid.dt / refine
    ts = grid_times(grid, refine)
    out = np.empty((m + 1, n, n))
    out[: s * refine + 1] = np.eye(n)
    y = np.eye(n)
    for j in range(s * refine, m):
        t = ts[j]
        k1 = np.asarray(afn(t)) @ y
        k2 = np.asarray(afn(t + h / 2.0)) @ (y + (h / 2.0) * k1)
        k3 = np.asarray(afn(t + h / 2.0)) @ (y + (h / 2.0) * k2)
        k4 = np.asarray(afn(t + h)) @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("non-finite fundamental matrix at t=%.6g" % ts[j + 1])
        out[j + 1] = y
    return TimeGridFn(out, grid, refine)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------

def solve_linear(a: np.ndarray, b: np.ndarray, context: str = ""):
    """Solve ``a x = b`` with one step of iterative refinement.

    Returns ``(x, cond_estimate)`` where the condition estimate is the
    1-norm condition number computed from an explicit inverse (matrices in
    this package are at most a few hundred rows, so the extra O(n^3) is
    irrelevant).  Raises :class:`SingularMatrixError` naming ``context``
    when the estimate exceeds 1e12 or the factorization fails outright.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    where = " in " + context if context else ""
    try:
        x = np.linalg.solve(a, b)
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("exactly singular matrix%s" % where) from None
    # the product can round a hair below the mathematical floor of 1
    cond = max(np.linalg.norm(a, 1) * np.linalg.norm(inv, 1), 1.0)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(
            "singular to working precision%s (cond estimate %.3e)" % (where, cond)
        )
    x = x + np.linalg.solve(a, b - a @ x)
    return x, cond
