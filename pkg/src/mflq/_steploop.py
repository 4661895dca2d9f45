"""Pure-numpy stepping kernel for the population simulator.

One call advances a chunk of Monte Carlo paths through the whole time
grid.  The compiled kernel in ``_stepcore`` implements the same contract;
:mod:`mflq.backend` picks between them.

Contract notes shared by both backends:

* every matrix action is applied per agent with a fixed reduction order
  (``np.einsum`` without optimization here, explicit loops in the
  compiled kernel), so permuting agents together with their inputs
  permutes the outputs without changing any value;
* the empirical population average is summed in ascending sorted order
  per coordinate, making it invariant under agent permutations;
* paths inside a chunk are advanced independently.
"""

import numpy as np

__all__ = ["step_chunk"]


def _apply(mat, rows):
    """Matrix action on a (paths, agents, dim) stack of row vectors."""
    return np.einsum("ab,cib->cia", mat, rows, optimize=False)


def _selectors(typ, ntypes):
    """Per-type agent selectors; contiguous runs become slices."""
    out = []
    for k in range(ntypes):
        idx = np.flatnonzero(typ == k)
        if idx.size and idx[-1] - idx[0] + 1 == idx.size:
            out.append(slice(int(idx[0]), int(idx[-1]) + 1))
        else:
            out.append(idx)
    return out


def step_chunk(typ, drm, drv, sdm, sdv, ug, uo, ar, sig,
               breal, dreal, freal, fxhat, xi, dt, dw, perturb,
               xt, xa, xr, u):
    """Advance one chunk of paths; results land in the ``xt``..``u`` arrays.

    Three state groups are stepped with shared noise.  ``xt`` holds the
    transformed auxiliary stack (dimension ``2n``) that drives the control
    rule, ``xa`` the auxiliary state with the deterministic consistency
    average as coupling input, ``xr`` the real state coupled through the
    empirical population average of the chunk's own agents.

    Shapes: ``typ`` (N,) int; per-type tables ``drm``/``sdm`` (K, S, 2n, 2n),
    ``drv``/``sdv`` (K, S, 2n), ``ug`` (K, S, d, 2n), ``uo`` (K, S, d),
    ``ar`` (K, S, n, n), ``sig`` (K, S, n); shared tables ``breal``/``dreal``
    (S, n, d), ``freal`` (S, n, n), ``fxhat`` (S, n); ``xi`` (N, n);
    ``dw`` (C, S, N); ``perturb`` (S, N, d); outputs ``xt`` (C, S+1, N, 2n),
    ``xa``/``xr`` (C, S+1, N, n), ``u`` (C, S, N, d).
    """
    steps = dw.shape[1]
    nagents = typ.shape[0]
    sel = _selectors(typ, drm.shape[0])

    xt[:, 0] = 0.0
    xa[:, 0] = xi
    xr[:, 0] = xi
    for m in range(steps):
        xbar = np.sort(xr[:, m], axis=1).sum(axis=1) / nagents
        fx = np.einsum("ab,cb->ca", freal[m], xbar, optimize=False)[:, None, :]
        for k, sl in enumerate(sel):
            if isinstance(sl, np.ndarray) and sl.size == 0:
                continue
            xtk = xt[:, m, sl]
            dwk = dw[:, m, sl, None]
            uk = _apply(ug[k, m], xtk) + uo[k, m] + perturb[m, sl]
            u[:, m, sl] = uk
            xt[:, m + 1, sl] = (
                xtk
                + dt * (_apply(drm[k, m], xtk) + drv[k, m])
                + (_apply(sdm[k, m], xtk) + sdv[k, m]) * dwk
            )
            bu = _apply(breal[m], uk)
            du = _apply(dreal[m], uk) + sig[k, m]
            xak = xa[:, m, sl]
            xa[:, m + 1, sl] = (
                xak + dt * (_apply(ar[k, m], xak) + bu + fxhat[m]) + du * dwk
            )
            xrk = xr[:, m, sl]
            xr[:, m + 1, sl] = (
                xrk + dt * (_apply(ar[k, m], xrk) + bu + fx) + du * dwk
            )
