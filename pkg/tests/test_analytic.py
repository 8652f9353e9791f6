import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.optimize import brentq

from u2ucov import analytic
from u2ucov.analytic import (CellGrid, LaplaceTable, NumericalError, _cell_gain, _cell_terms, cell_grid, coverage_gue,
                             coverage_u2u, far_field_tail, interference_integral, interference_spec,
                             laplacian_derivatives, laplacian_gue, laplacian_u2u, log_laplacian, rayleigh_pdf,
                             serving_breakpoints, serving_density, threshold_crossing_db)
from u2ucov.channel import bs_gain_at, los_step_table, serving_power, serving_zeta
from u2ucov.config import load_scenario
from u2ucov.special import psi_kernel

from conftest import cached_simulation

# Laplace variable (1/W) near which the default interference field bites
S_REF = {"u": 2e10, "b": 3e11}


def _s_at(fn, params, level):
    return 10 ** brentq(lambda ls: float(np.log(max(fn(10 ** ls, params), 1e-300))) - math.log(level), 4, 18)


# --- elementary properties ------------------------------------------------------

@pytest.mark.parametrize("src,victim", [("u", "u"), ("g", "u"), ("u", "b"), ("g", "b")])
def test_zero_s_gives_zero_integral(params, src, victim):
    spec = interference_spec(src, victim, params)
    for xi in "LN":
        assert interference_integral(spec, xi, 0.0) == 0.0
    with pytest.raises(ValueError):
        interference_integral(spec, "L", -1.0)


def test_laplacians_at_zero(params):
    assert laplacian_u2u(0.0, params) == 1.0
    assert laplacian_gue(0.0, params) == 1.0


def test_no_interferers_gives_unit_laplacian(params):
    s = np.logspace(6, 16, 11)
    assert np.all(laplacian_u2u(s, params, lambda_u=0.0, lambda_b=0.0) == 1.0)
    assert np.all(laplacian_gue(s, params, lambda_u=0.0, lambda_b=0.0) == 1.0)


@pytest.mark.parametrize("fn,victim", [(laplacian_u2u, "u"), (laplacian_gue, "b")])
def test_laplacian_monotone_on_log_grid(params, fn, victim):
    s = S_REF[victim] * np.logspace(-4, 4, 41)
    L = fn(s, params)
    assert np.all((L >= 0) & (L <= 1))
    assert np.all(np.diff(L) <= 0)
    assert L[0] > 0.999 and L[-1] < 1e-3


def test_density_validation(params):
    with pytest.raises(ValueError):
        interference_spec("u", "u", params, density=-1.0)


def test_baseline_gue_laplacian_drops_uav_factor(params):
    s = S_REF["b"]
    both = laplacian_gue(s, params)
    only_g = laplacian_gue(s, params, lambda_u=0.0)
    only_u = laplacian_gue(s, params, lambda_b=0.0)
    assert both == pytest.approx(only_g * only_u, rel=1e-12)
    assert both < only_g < 1.0


# --- step-sum identities ----------------------------------------------------------

def _kernel_difference_form(u, r, p, h, m, beta):
    """sum_i [p_{i-1} - p_i] Psi(r_i) plus the boundary terms; cells [r_i, r_{i+1}), r_n = inf."""
    psi = psi_kernel(u, r, h, m, beta)
    return -p[0] * psi[0] + np.sum((p[:-1] - p[1:]) * psi[1:])


@pytest.mark.invariant
@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.floats(2, 16), st.floats(0, 150), st.integers(1, 3), st.floats(0.4, 0.95),
       st.integers(0, 2 ** 32 - 1))
def test_abel_summation_identity(n, log_u, h, m, beta, seed):
    rng = np.random.default_rng(seed)
    r = np.concatenate(([0.0], np.cumsum(rng.uniform(5, 300, n - 1))))
    p = np.sort(rng.random(n))[::-1]
    u = np.array([10.0 ** log_u])
    hi = np.append(r[1:], np.inf)
    got = _cell_terms(CellGrid(r, hi, p, np.ones(n), h), p, u, m, beta).sum()
    ref = _kernel_difference_form(u[0], r, p, h, m, beta)
    scale = np.sum(np.abs(p * psi_kernel(u[0], r, h, m, beta)))
    assert abs(got - ref) <= 1e-10 * max(abs(ref), 1e-300) + 1e-13 * scale


def test_constant_probability_telescopes():
    r = np.linspace(0, 3000, 40)
    hi = np.append(r[1:], np.inf)
    u = np.array([3e7])
    p = np.full(40, 0.37)
    got = _cell_terms(CellGrid(r, hi, p, np.ones(40), 75.0), p, u, 1, 2 / 2.2).sum()
    assert got == pytest.approx(-0.37 * psi_kernel(3e7, 0.0, 75.0, 1, 2 / 2.2), rel=1e-12)


# --- brute-force quadrature oracle --------------------------------------------------

_GL = leggauss(12)


def _nodes(edges):
    t, w = _GL
    a, b = edges[:-1, None], edges[1:, None]
    return (0.5 * (b - a) * t + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * w).ravel()


def _brute_force(src, victim, xi, s, params, continuous_gain=False):
    """E[ integral (1 - exp(-s P g psi / tau)) r dr ] by direct 2-D quadrature.

    The fading average uses the Gamma moment generating function; the radial
    integral is taken over fine Gauss panels instead of the annulus kernel.
    """
    link = src + victim
    serving = "uu" if src == "u" else "gb"
    grid = cell_grid(link, params)
    R = params.field_radius
    cls = params.link(link, xi)
    m, alpha = cls.m_fading, cls.alpha
    h_x, h_y = params.heights(link)
    los = los_step_table(link, params)
    pdf, upper = serving_density(src, params)
    s_tab = los_step_table(serving, params, radius=upper + params.los_cell_width)

    x_edges = np.unique(np.concatenate(([0.0, upper], serving_breakpoints(src, upper, params, cos_step=0.01),
                                        grid.lo[grid.lo < upper])))
    xn, xw = _nodes(x_edges)
    xw = xw * pdf(xn)
    r_edges = np.unique(np.concatenate(([0.0, R], grid.lo, np.geomspace(0.05, R, 300))))

    def radial(x, u):
        edges = r_edges
        if victim == "b" and src == "g":
            edges = np.unique(np.concatenate(([x], edges[edges > x])))
        rn, rw = _nodes(edges)
        d = np.hypot(rn, h_x - h_y)
        pr = los(rn) if xi == "L" else 1.0 - los(rn)
        if victim == "u":
            g = 1.0
        elif continuous_gain:
            g = bs_gain_at(rn, h_x, params)
        else:
            k = np.clip(np.searchsorted(grid.lo, rn, side="right") - 1, 0, len(grid) - 1)
            g = grid.gain[k]
            if src == "g":
                kx = int(np.clip(np.searchsorted(grid.lo, x, side="right") - 1, 0, len(grid) - 1))
                part = rn < grid.hi[kx]
                g = np.where(part, _cell_gain(np.array([x]), grid.hi[kx:kx + 1], h_x, h_y, params)[0], g)
        mgf = 1.0 - (1.0 + u * g * d ** (-alpha) / m) ** (-m)
        return np.sum(rw * pr * rn * mgf)

    total = 0.0
    for nu in "LN":
        pn = s_tab(xn) if nu == "L" else 1.0 - s_tab(xn)
        P = serving_power(serving, nu, xn, params)
        for j in range(len(xn)):
            if xw[j] * pn[j] > 0:
                total += xw[j] * pn[j] * radial(xn[j], s * P[j] / cls.tau_hat)
    return total


@pytest.mark.parametrize("src,victim", [("u", "u"), ("g", "u"), ("u", "b"), ("g", "b")])
@pytest.mark.parametrize("xi", ["L", "N"])
def test_interference_integral_vs_brute_force(params, src, victim, xi):
    s = 3 * S_REF[victim]
    got = float(interference_integral(interference_spec(src, victim, params), xi, s))
    ref = _brute_force(src, victim, xi, s, params)
    assert got == pytest.approx(ref, rel=1e-4)


@pytest.mark.parametrize("src", ["u", "g"])
def test_cell_gain_close_to_continuous_gain(params, src):
    # held-constant cell gain against the exact antenna pattern
    s = 3 * S_REF["b"]
    spec = interference_spec(src, "b", params)
    got = sum(float(interference_integral(spec, xi, s)) for xi in "LN")
    ref = sum(_brute_force(src, "b", xi, s, params, continuous_gain=True) for xi in "LN")
    assert got == pytest.approx(ref, rel=2e-3)


def test_far_field_tail_accounts_for_truncation(params):
    # uu links: unit gain and frozen LoS beyond the table, so field + tail is radius-free
    wide = load_scenario(overrides=["analytic.field_radius_m=20000"])
    s = S_REF["u"]
    totals, tails = [], []
    for p in (params, wide):
        spec = interference_spec("u", "u", p)
        tails.append(float(far_field_tail(spec, s)))
        totals.append(sum(float(interference_integral(spec, xi, s)) for xi in "LN") + tails[-1])
    assert totals[0] == pytest.approx(totals[1], rel=1e-6)
    assert 0.0 < tails[1] < tails[0]


# --- Laplace transform against simulated interference ------------------------------

@pytest.fixture(scope="module")
def sim_defaults():
    return cached_simulation((), 100_000, 1)


@pytest.mark.parametrize("fn,victim", [(laplacian_u2u, "u"), (laplacian_gue, "b")])
def test_laplacian_vs_monte_carlo(params, sim_defaults, fn, victim):
    s0 = _s_at(fn, params, 0.9)
    rec = sim_defaults[victim]
    mc = float(np.mean(np.exp(-s0 * (rec.i_gue + rec.i_uav))))
    assert float(fn(s0, params)) == pytest.approx(mc, rel=1e-3)


# --- tabulated eta -----------------------------------------------------------------

def test_laplace_table_matches_direct(params):
    specs = analytic._victim_specs("b", params)
    table = LaplaceTable.build(specs, np.geomspace(1e8, 1e14, 50))
    s = np.geomspace(table.s_grid[0], table.s_grid[-1], 37)[1:-1] * 1.013
    direct = log_laplacian(specs, s)
    assert np.allclose(table(s), direct, rtol=1e-5)
    assert table(0.0) == 0.0 and table(np.inf) == -np.inf


def test_laplace_table_zero_density(params):
    specs = analytic._victim_specs("u", params, 0.0, 0.0)
    table = LaplaceTable.build(specs, [1e10])
    assert table.zero and np.all(table(np.array([1.0, 1e20])) == 0.0)


# --- derivatives -----------------------------------------------------------------------

def test_derivatives_order_zero():
    res = laplacian_derivatives(lambda s: -2.0 * s, np.array([0.7]), 0)
    assert res.values.shape == (1, 1)
    assert res.values[0, 0] == pytest.approx(math.exp(-1.4))


def test_derivatives_linear_eta():
    c = 3.0
    s = np.array([0.1, 1.0, 4.0])
    res = laplacian_derivatives(lambda x: -c * x, s, 1)
    assert np.allclose(res.values[1], -c * np.exp(-c * s), rtol=1e-8, atol=0)


def test_derivatives_sqrt_eta():
    c = 1.7
    res = laplacian_derivatives(lambda x: -c * np.sqrt(x), np.array([1.0]), 2)
    d1, d2 = -c / 2, c / 4  # eta', eta'' at s = 1
    L = math.exp(-c)
    assert res.values[1, 0] == pytest.approx(L * d1, rel=1e-6)
    assert res.values[2, 0] == pytest.approx(L * (d1 * d1 + d2), rel=1e-6)
    assert np.all(res.errors[1:] < 1e-6)


def test_derivatives_report_instability():
    rough = lambda x: -x + 1e-3 * np.sin(1e6 * x)  # noqa: E731
    with pytest.raises(NumericalError):
        laplacian_derivatives(rough, np.array([1.0]), 1)
    with pytest.raises(ValueError):
        laplacian_derivatives(lambda x: -x, np.array([0.0]), 1)


# --- coverage ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_u2u(params):
    return coverage_u2u(params, np.linspace(-10, 30, 21))


@pytest.fixture(scope="module")
def default_gue(params):
    return coverage_gue(params, np.linspace(-10, 30, 21))


@pytest.mark.invariant
def test_coverage_curves_valid(default_u2u, default_gue):
    for res in (default_u2u, default_gue):
        assert np.all((res.coverage >= 0) & (res.coverage <= 1))
        assert np.all(np.diff(res.coverage) <= 1e-9)
        assert np.allclose(res.los_branch + res.nlos_branch, res.coverage, atol=1e-12)
        assert np.all(res.quad_err < 1e-5)
        for key in ("neval", "table_points", "eta_tail_beyond_field", "field_radius_m"):
            assert key in res.diagnostics


@pytest.mark.invariant
def test_m1_never_calls_derivatives(params, default_u2u):
    before = analytic.derivative_calls
    coverage_u2u(params, [0.0, 10.0])
    assert analytic.derivative_calls == before


def test_m2_uses_derivatives():
    p = load_scenario(overrides=["channel.m_fading=2"])
    before = analytic.derivative_calls
    res = coverage_u2u(p, [-5.0, 0.0, 5.0])
    assert analytic.derivative_calls > before
    assert np.all(np.diff(res.coverage) < 0)


@pytest.mark.parametrize("fn", [coverage_u2u, coverage_gue])
def test_very_low_threshold_gives_full_coverage(params, fn):
    assert fn(params, [-80.0]).coverage[0] == pytest.approx(1.0, abs=1e-3)
    assert fn(params, [-80.0], lambda_u=0.0).coverage[0] == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("fn,link,role", [(coverage_u2u, "uu", "u"), (coverage_gue, "gb", "g")])
def test_noise_only_coverage(params, fn, link, role):
    T_db = np.array([-5.0, 10.0, 25.0])
    res = fn(params, T_db, lambda_u=0.0, lambda_b=0.0)
    pdf, upper = serving_density(role, params)
    los = los_step_table(link, params, radius=upper + 100)
    p_max, rho, eps = params.power_control.for_role(role)
    for T, cov in zip(10 ** (T_db / 10), res.coverage):
        def f(r):
            acc = 0.0
            for nu, w in (("L", float(los(r))), ("N", 1.0 - float(los(r)))):
                z = float(serving_zeta(link, nu, r, params))
                P = min(p_max, rho * z ** eps)
                acc += w * math.exp(-params.noise_w * T * z / P)
            return pdf(r) * acc
        pts = list(np.arange(0, upper, params.los_cell_width)[1:])
        ref = integrate.quad(f, 0, upper, points=pts, limit=2000, epsabs=1e-10)[0]
        assert cov == pytest.approx(ref, abs=2e-6)


@pytest.mark.invariant
def test_zero_noise_and_no_interferers_gives_full_coverage():
    p = load_scenario(overrides=["noise.density_dbm_hz=-400"])
    for fn in (coverage_u2u, coverage_gue):
        assert np.allclose(fn(p, [0.0, 30.0], lambda_u=0.0, lambda_b=0.0).coverage, 1.0, atol=1e-9)


@pytest.mark.invariant
@pytest.mark.parametrize("fn", [coverage_u2u, coverage_gue])
def test_coverage_non_increasing_in_uav_density(params, fn):
    T = [0.0, 10.0]
    cov = [fn(params, T, lambda_u=lam).coverage for lam in (0.0, 1e-6, 3e-6)]
    assert np.all(cov[0] >= cov[1]) and np.all(cov[1] >= cov[2])
    assert np.all(cov[0] > cov[2])


def test_baseline_gue_median_above_with_uav(params, default_gue):
    base = coverage_gue(params, default_gue.thresholds_db, lambda_u=0.0)
    m_base = threshold_crossing_db(base.thresholds_db, base.coverage)
    m_with = threshold_crossing_db(default_gue.thresholds_db, default_gue.coverage)
    assert math.isfinite(m_base) and m_base > m_with


def test_exact_theorem2_mode(params):
    literal = load_scenario(overrides=["analytic.exact_theorem2=true"])
    T = [-5.0, 5.0, 15.0]
    a = coverage_gue(params, T).coverage
    b = coverage_gue(literal, T).coverage
    # only GUEs that would exceed P_max differ: unclamped power means the same or better SINR
    assert np.all(b >= a - 1e-9)
    assert np.all(np.abs(a - b) < 0.05)


def test_left_edge_gain_option_runs(params):
    left = load_scenario(overrides=["analytic.gain_point=left"])
    a = coverage_gue(params, [0.0]).coverage[0]
    b = coverage_gue(left, [0.0]).coverage[0]
    assert 0 < b < 1 and abs(a - b) < 0.02


def test_threshold_validation(params):
    with pytest.raises(ValueError):
        coverage_u2u(params, [])
    with pytest.raises(ValueError):
        coverage_u2u(params, [float("nan")])


def test_coverage_csv(tmp_path, default_u2u):
    path = tmp_path / "cov.csv"
    default_u2u.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["threshold_db", "coverage", "coverage_los_branch", "coverage_nlos_branch", "quad_err"]
    assert len(rows) == 22
    assert float(rows[1][1]) == pytest.approx(default_u2u.coverage[0], rel=1e-9)


def test_threshold_crossing():
    t = np.array([0.0, 10.0, 20.0])
    assert threshold_crossing_db(t, np.array([0.9, 0.6, 0.2])) == pytest.approx(12.5)
    assert math.isnan(threshold_crossing_db(t, np.array([0.9, 0.8, 0.7])))
    assert math.isnan(threshold_crossing_db(t, np.array([0.4, 0.3, 0.2])))


def test_rayleigh_pdf_normalized():
    assert integrate.quad(lambda r: rayleigh_pdf(r, 100.0, 250.0), 0, 250)[0] == pytest.approx(1.0, rel=1e-9)
    assert rayleigh_pdf(300.0, 100.0, 250.0) == 0.0
