"""Oracle and invariant tests for the decoupled solve-and-simulate engine."""

from __future__ import annotations

import numpy as np
import pytest

from mflq import assembly, engine, model, numkit, riccati
from mflq.assembly import CCMatrices, MeanFieldInputError
from mflq.model import Grid
from mflq.numkit import MatFn, TimeGridFn


def scalar_config(**over):
    cfg = {
        "dims": {"n": 1, "d": 1, "K": 1, "N": 4},
        "grid": {"T": 1.0, "steps": 4},
        "types": [
            {
                "A": [[0.25]],
                "H": [[0.2]],
                "R": [[1.0]],
                "sigma": [0.4],
                "xi0": [1.0],
                "eta": [0.5],
            }
        ],
        "shared": {
            "B": [[1.0]],
            "D": [[0.2]],
            "F": [[0.2]],
            "Kcoef": [[0.15]],
            "L": [[0.2]],
            "M": [[0.1]],
            "Phi": [[0.4]],
            "Q": [[0.5]],
            "S": [[0.3]],
            "Gamma": [[0.3]],
        },
        "population": {"counts": [4], "pi": [1.0]},
    }
    cfg.update(over)
    return cfg


def square_cc(
    grid,
    a1=0.0,
    a2=0.0,
    a3=0.0,
    b1=0.0,
    b2=0.0,
    b3=0.0,
    c=0.0,
    d1=0.0,
    d2=0.0,
    gamma=0.0,
    phihat=0.0,
    xi=0.0,
    eta=0.0,
    sigma0=0.0,
):
    """Hand-built 1x1 square system (identity martingale lift, one noise)."""
    const = lambda v: MatFn(constant=np.array([[float(v)]]))
    ph = np.array([[float(phihat)]])
    gm = np.array([[float(gamma)]])
    return CCMatrices(
        nx=1,
        ny=1,
        grid=grid,
        A1=const(a1),
        A2=const(a2),
        A3=const(a3),
        B1=const(b1),
        B2=const(b2),
        B3=const(b3),
        C=const(c),
        D1=const(d1),
        D2=const(d2),
        GammaHat=gm,
        PhiHat=ph,
        Ihat=np.eye(1),
        Ibar=np.linalg.inv(np.eye(1) - ph @ gm),
        XiHat=np.array([float(xi)]),
        SigmaHat=np.array([float(eta)]),
        Sigma0Hat=MatFn(constant=np.array([float(sigma0)])),
        noise_idx=np.zeros(1, dtype=int),
        n_noise=1,
        block_index={},
        constant_dynamics=True,
        special_case=(b2 == 0.0 and b3 == 0.0) or (c == 0.0 and d1 == 0.0),
    )


def benchmark_solution(steps=40, **over):
    spec = model.parse(scalar_config(**over))
    cc = assembly.assemble_cc(spec)
    grid = Grid(T=1.0, steps=steps)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    return spec, cc, grid, rsol, osol


# ---------------------------------------------------------------------------
# offset ODE
# ---------------------------------------------------------------------------

def test_offset_homogeneous_zero():
    cfg = scalar_config()
    cfg["types"][0].update({"xi0": [0.0], "eta": [0.0], "sigma": [0.0]})
    spec = model.parse(cfg)
    cc = assembly.assemble_cc(spec)
    grid = Grid(T=1.0, steps=30)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    assert not np.any(osol.psi.values)


def test_offset_frozen_constant_square():
    grid = Grid(T=1.0, steps=16)
    cc = square_cc(grid, eta=0.7)
    rsol = riccati.solve_direct(cc, grid)
    assert not np.any(rsol.phi.values)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    assert np.all(osol.psi.values == 0.7)


def test_offset_frozen_constant_doubled():
    cfg = scalar_config()
    cfg["types"][0].update({"A": [[0.0]], "H": [[0.0]], "sigma": [0.0]})
    for name in ("B", "D", "F", "Kcoef", "L", "M", "Phi", "Q", "S", "Gamma"):
        cfg["shared"][name] = [[0.0]]
    spec = model.parse(cfg)
    cc = assembly.assemble_cc(spec)
    grid = Grid(T=1.0, steps=10)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    want = np.zeros(cc.ny)
    want[cc.y_slice("beta_1")] = 0.5  # the terminal data eta sits on the beta rows
    assert np.all(osol.psi.values == want)


def test_offset_terminal_exact_and_flag():
    _, cc, _, _, osol = benchmark_solution(steps=25)
    want = cc.Ibar @ (cc.PhiHat @ cc.XiHat + cc.SigmaHat)
    assert np.max(np.abs(osol.psi.values[-1] - want)) <= 1e-12
    assert osol.b_is_zero


def euler_psi_origin(cc, affine, pfn, grid, steps):
    """Independent explicit-Euler backward integration of the offset ODE."""
    h = grid.T / steps
    gh = cc.GammaHat
    psi = cc.Ibar @ (cc.PhiHat @ cc.XiHat + cc.SigmaHat)
    half = cc.nx // 2
    for m in range(steps):
        t = grid.T - m * h
        a1, a2, a3 = cc.A1.at(t), cc.A2.at(t), cc.A3.at(t)
        a = a1 + gh @ a3
        b = a2 + a3 @ gh
        q = a1 @ gh + gh @ a3 @ gh + gh @ a2 + cc.B1.at(t)
        p = pfn.at(t)
        fx = affine.fx_at(t, cc.nx)
        fy = affine.fy_at(t, cc.ny)
        rhs = -(b @ psi) - p @ (q @ psi) - p @ (a @ cc.XiHat + fx + gh @ fy) - a3 @ cc.XiHat - fy
        w = p @ (cc.D2.at(t) - gh @ cc.Ihat) - cc.Ihat
        mvec = p @ ((cc.C.at(t) @ gh + cc.D1.at(t)) @ psi + cc.C.at(t) @ cc.XiHat + cc.Sigma0Hat.at(t))
        red = np.linalg.lstsq(w[:, :half], mvec, rcond=None)[0]
        g = np.concatenate([red, np.zeros(half)])
        rhs = rhs + (p @ (cc.B2.at(t) + gh @ cc.B3.at(t)) + cc.B3.at(t)) @ g
        psi = psi - h * rhs
    return psi


def test_offset_matches_independent_euler_with_affine():
    spec = model.parse(scalar_config())
    ts = np.linspace(0.0, 1.0, spec.grid.steps + 1)
    xhat = TimeGridFn((0.3 + 0.1 * ts)[:, None], spec.grid, 1)
    cc, affine = assembly.assemble_cc_frozen(spec, xhat)
    grid = Grid(T=1.0, steps=100)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, affine, grid=grid)
    rough = euler_psi_origin(cc, affine, rsol.phi, grid, steps=1600)
    assert np.max(np.abs(osol.psi.node(0) - rough)) <= 5e-3
    assert np.max(np.abs(osol.psi.node(0))) > 0.05  # not a trivial agreement


# ---------------------------------------------------------------------------
# martingale reconstruction
# ---------------------------------------------------------------------------

def test_z_all_numerator_terms_vanish():
    grid = Grid(T=1.0, steps=12)
    cc = square_cc(grid, a3=0.3, b2=0.2, d2=0.5, phihat=0.4)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    rng = np.random.default_rng(7)
    for t in (0.0, 0.4, 1.0):
        z = engine.reconstruct_z(cc, rsol, osol, rng.standard_normal(1), t)
        assert not np.any(z)


def test_z_linear_in_sigma0():
    grid = Grid(T=1.0, steps=24)
    zs = []
    for s0 in (0.3, 0.6):
        cc = square_cc(grid, a3=0.4, b2=0.3, phihat=0.5, sigma0=s0)
        rsol = riccati.solve_direct(cc, grid)
        osol = engine.solve_offset(cc, rsol, grid=grid)
        zs.append([engine.reconstruct_z(cc, rsol, osol, np.zeros(1), t) for t in (0.25, 0.75)])
    np.testing.assert_allclose(np.array(zs[1]), 2.0 * np.array(zs[0]), atol=1e-12)


def test_z_sigma_only_closed_form_and_mc_regression():
    # with C = D1 = D2 = 0 and GammaHat = 0 the factor is -I and the
    # reconstruction collapses to Z(t) = phi(t) Sigma0
    grid = Grid(T=1.0, steps=50)
    cc = square_cc(grid, a1=-0.2, a2=0.1, a3=0.6, xi=0.7, eta=0.3, sigma0=0.5)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    rng = np.random.default_rng(11)
    for t in (0.1, 0.5, 0.9):
        want = rsol.phi.at(t)[0, 0] * 0.5
        got = engine.reconstruct_z(cc, rsol, osol, rng.standard_normal(1), t)
        assert got[0] == pytest.approx(want, abs=1e-12)
    assert abs(rsol.phi.at(0.5)[0, 0]) > 0.05

    # martingale-representation estimate: E[dY dW] / dt recovers Z
    paths = 40000
    dw = rng.standard_normal((paths, grid.steps, 1)) * np.sqrt(grid.dt)
    sol = engine.simulate_decoupled(cc, rsol, osol, dw, grid)
    ts = numkit.grid_times(grid)
    for m in (10, 25, 40):
        stat = (sol.y[:, m + 1, 0] - sol.y[:, m, 0]) * dw[:, m, 0] / grid.dt
        est = stat.mean()
        se = stat.std(ddof=1) / np.sqrt(paths)
        want = engine.reconstruct_z(cc, rsol, osol, np.zeros(1), ts[m + 1])[0]
        assert se < 1e-2
        assert abs(est - want) <= 4.0 * se, "node %d" % m


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def test_simulate_boundary_residuals_and_dt_ratio():
    spec, cc, _, rsol, osol = benchmark_solution(steps=320)
    paths = 600
    rng = np.random.default_rng(20240817)
    g80 = Grid(T=1.0, steps=80)
    g40 = Grid(T=1.0, steps=40)
    dw80 = rng.standard_normal((paths, 80, cc.n_noise)) * np.sqrt(g80.dt)
    dw40 = dw80[:, 0::2] + dw80[:, 1::2]  # the same Brownian path, coarser cells
    s80 = engine.simulate_decoupled(cc, rsol, osol, dw80, g80)
    s40 = engine.simulate_decoupled(cc, rsol, osol, dw40, g40)
    assert s80.initial_residual.max() <= 1e-10
    assert s40.initial_residual.max() <= 1e-10
    # the ansatz backward state satisfies the terminal coupling identically
    for s in (s40, s80):
        direct = np.abs(s.y[:, -1] - s.x[:, -1] @ cc.PhiHat.T - cc.SigmaHat)
        assert direct.max() <= 1e-12
    # the replayed backward state carries the discretization error
    ratio = s40.terminal_residual.mean() / s80.terminal_residual.mean()
    assert s80.terminal_residual.max() > 0.0
    assert 1.5 <= ratio <= 2.5


def test_simulate_zero_noise_is_deterministic_mode_bitwise():
    _, cc, grid, rsol, osol = benchmark_solution(steps=32)
    zero = np.zeros((3, grid.steps, cc.n_noise))
    sol = engine.simulate_decoupled(cc, rsol, osol, zero, grid)
    det = engine.solve_deterministic(cc, rsol, osol, grid)
    assert det.deterministic and not sol.deterministic
    for p in range(3):
        assert np.array_equal(sol.x[p], det.x.values)
        assert np.array_equal(sol.y[p], det.y.values)
        assert np.array_equal(sol.z[p], det.z.values)
        assert np.array_equal(sol.xtilde[p], det.xtilde.values)


def test_simulate_zero_diffusion_ignores_noise():
    cfg = scalar_config()
    cfg["types"][0]["sigma"] = [0.0]
    cfg["shared"]["D"] = [[0.0]]
    spec = model.parse(cfg)
    cc = assembly.assemble_cc(spec)
    grid = Grid(T=1.0, steps=20)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    rng = np.random.default_rng(4)
    dw = rng.standard_normal((5, grid.steps, cc.n_noise)) * np.sqrt(grid.dt)
    sol = engine.simulate_decoupled(cc, rsol, osol, dw, grid)
    det = engine.solve_deterministic(cc, rsol, osol, grid)
    for p in range(5):
        assert np.array_equal(sol.x[p], det.x.values)


def test_simulate_mc_mean_matches_expectation_solve():
    _, cc, grid, rsol, osol = benchmark_solution(steps=100)
    det = engine.solve_deterministic(cc, rsol, osol, grid)
    paths = 400
    rng = np.random.default_rng(90210)
    dw = rng.standard_normal((paths, grid.steps, cc.n_noise)) * np.sqrt(grid.dt)
    sol = engine.simulate_decoupled(cc, rsol, osol, dw, grid)
    mc = sol.x.mean(axis=0)
    stderr = sol.x.std(axis=0, ddof=1) / np.sqrt(paths)
    assert np.all(np.abs(mc - det.x.values) <= 3.0 * stderr + 1e-12)
    # the mean band is noise-free, so there the agreement is exact
    half_x = cc.x_fluct_offset
    assert np.array_equal(sol.x[0, :, :half_x], det.x.values[:, :half_x])


def one_level_expectation_euler(es, grid, ey, ez):
    """Forward Euler of the one-level expectation dynamics (independent)."""
    ts = numkit.grid_times(grid)
    ex = np.empty((grid.steps + 1, es.nx))
    ex[0] = es.Xi + es.GammaBar @ ey[0]
    for m in range(grid.steps):
        t = ts[m]
        drift = (
            es.A1full.at(t) @ ex[m]
            + es.B1.at(t) @ ey[m]
            + es.B2.at(t) @ ez[m]
            + es.affine.fx_at(t, es.nx)
        )
        ex[m + 1] = ex[m] + grid.dt * drift
    return ex


def test_expectation_dynamics_match_doubled_mean_band():
    # the deterministic mode and the one-level expectation system are two
    # transcriptions of the same dynamics; their Euler-level gap is O(dt)
    spec = model.parse(scalar_config())
    cc = assembly.assemble_cc(spec)
    es = assembly.assemble_expectation(spec)
    fine = Grid(T=1.0, steps=400)
    rsol = riccati.solve_direct(cc, fine)
    osol = engine.solve_offset(cc, rsol, grid=fine)
    gaps = []
    for steps in (100, 200):
        grid = Grid(T=1.0, steps=steps)
        det = engine.solve_deterministic(cc, rsol, osol, grid)
        hx, hy = cc.x_fluct_offset, cc.y_fluct_offset
        ey = det.y.values[:, :hy] + det.y.values[:, hy:]
        ez = det.z.values[:, :hx] + det.z.values[:, hx:]
        xs = det.x.values[:, :hx] + det.x.values[:, hx:]
        ex = one_level_expectation_euler(es, grid, ey, ez)
        gaps.append(np.max(np.abs(ex - xs)))
    assert gaps[0] <= 0.05
    assert gaps[1] <= 0.65 * gaps[0]


def test_simulate_noise_shape_errors():
    _, cc, grid, rsol, osol = benchmark_solution(steps=10)
    with pytest.raises(MeanFieldInputError, match="noise increments"):
        engine.simulate_decoupled(cc, rsol, osol, np.zeros((4, 9, cc.n_noise)), grid)
    with pytest.raises(MeanFieldInputError, match="noise increments"):
        engine.simulate_decoupled(cc, rsol, osol, np.zeros((4, 10, cc.n_noise + 1)), grid)
    with pytest.raises(MeanFieldInputError, match="noise increments"):
        engine.simulate_decoupled(cc, rsol, osol, np.zeros((10, cc.n_noise)), grid)


def test_simulate_nonfinite_state_raises():
    grid = Grid(T=1.0, steps=4)
    cc = square_cc(grid, a1=1e160, xi=1.0)
    rsol = riccati.solve_direct(cc, grid)
    osol = engine.solve_offset(cc, rsol, grid=grid)
    with pytest.raises(numkit.NonFiniteError, match="decoupled simulation"):
        engine.simulate_decoupled(cc, rsol, osol, np.zeros((1, 4, 1)), grid)
