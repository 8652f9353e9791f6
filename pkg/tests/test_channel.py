import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from u2ucov.channel import (LinkGeometry, LosStepFunction, array_factor, bs_antenna_gain, bs_gain_at,
                            element_gain, fading_cdf, large_scale_fading, los_index, los_probability,
                            los_step_table, path_loss, sample_fading, serving_power, transmit_power,
                            zenith_angle_at_bs)
from u2ucov.config import AntennaParams, LinkClass, PowerControlParams, dbm_to_watt, load_scenario, watt_to_dbm

URBAN = dict(a1=0.3, a2=500.0, a3=20.0)


def _itu_direct(r, hx, hy, a1, a2, a3):
    # plain loop re-evaluation of the product formula, k = J
    J = math.floor(r * math.sqrt(a1 * a2) / 1000.0 - 1.0)
    prod = 1.0
    for j in range(J + 1):
        h = hx - (j + 0.5) * (hx - hy) / (J + 1)
        prod *= 1.0 - math.exp(-h * h / (2 * a3 * a3))
    return prod


# --- LoS probability --------------------------------------------------------

@pytest.mark.invariant
def test_los_short_link_is_empty_product():
    assert los_index(50.0, 0.3, 500.0) == -1
    assert los_probability(50.0, 100, 1.5, **URBAN) == 1.0
    assert los_probability(0.0, 100, 1.5, **URBAN) == 1.0


def test_los_accepts_geometry():
    g = LinkGeometry(500.0, 100.0, 1.5)
    assert los_probability(g, **URBAN) == los_probability(500.0, 100.0, 1.5, **URBAN)


@pytest.mark.parametrize("r", [500.0, 81.7, 163.3, 1234.5, 4000.0])
@pytest.mark.parametrize("hx,hy", [(100, 1.5), (1.5, 25), (100, 100), (25, 1.5), (150, 25)])
def test_los_matches_direct_product(r, hx, hy):
    got = los_probability(r, hx, hy, **URBAN)
    assert got == pytest.approx(_itu_direct(r, hx, hy, **URBAN), rel=1e-13)


def test_los_500m_uav_to_gue_strictly_inside_unit_interval():
    p = los_probability(500.0, 100.0, 1.5, **URBAN)
    assert 0.0 < p < 1.0


@pytest.mark.invariant
@settings(max_examples=200, deadline=None)
@given(st.floats(0, 20000), st.floats(0, 300), st.floats(0, 300))
def test_los_in_unit_interval(r, hx, hy):
    p = los_probability(r, hx, hy, **URBAN)
    assert 0.0 <= p <= 1.0
    if r < 1000 / math.sqrt(150):
        assert p == 1.0


# --- step table ---------------------------------------------------------------

def test_step_table_spacing_and_first_value(params):
    for lt in ("gb", "ub", "uu", "gu"):
        t = los_step_table(lt, params)
        assert t.spacing == pytest.approx(1000 / math.sqrt(150))
        assert t.spacing == pytest.approx(81.65, abs=0.01)
        assert t.p_los[0] == 1.0


@pytest.mark.invariant
def test_step_table_reproduces_los_at_left_edges(params):
    for lt in ("gb", "ub", "uu", "gu"):
        t = los_step_table(lt, params)
        hx, hy = params.heights(lt)
        direct = np.array([los_probability(r, hx, hy, **URBAN) for r in t.breakpoints])
        assert np.array_equal(t.p_los, direct)
        # constant across the whole cell, not just at its edge
        mid = t.breakpoints + 0.999 * t.spacing
        assert np.array_equal(t(mid), los_probability(mid, hx, hy, **URBAN))


def test_step_table_default_truncation(params):
    t = los_step_table("gb", params)
    w = params.los_cell_width
    assert t.breakpoints[-1] + w >= 10 / math.sqrt(math.pi * params.lambda_b) - 1e-9
    assert t(1e6) == t.p_los[-1]


@pytest.mark.parametrize("hx,hy", [(100, 1.5), (25, 1.5), (100, 25), (150, 25)])
def test_step_table_non_increasing(hx, hy):
    p = load_scenario({"uav.height_m": hx}) if hx > 25 else load_scenario()
    vals = np.array([los_probability(r, hx, hy, **URBAN) for r in np.arange(200) * p.los_cell_width])
    assert np.all(np.diff(vals) <= 0)


def test_step_function_validation(tmp_path):
    with pytest.raises(ValueError):
        LosStepFunction(np.array([0.0, 0.0]), np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        LosStepFunction(np.array([0.0, 1.0]), np.array([1.0, 1.5]))
    t = LosStepFunction(np.array([0.0, 1.0]), np.array([1.0, 0.5]))
    t.to_csv(tmp_path / "los.csv")
    lines = (tmp_path / "los.csv").read_text().splitlines()
    assert lines[0] == "r_left_m,p_los" and len(lines) == 3


# --- path loss ---------------------------------------------------------------

def test_path_loss_reference_and_power_law(params):
    cls = params.link("gb", "L")
    assert cls.tau_hat_db == pytest.approx(34.0206, abs=1e-4)
    assert path_loss(1.0, cls) == pytest.approx(cls.tau_hat)
    assert path_loss(200.0, cls) / path_loss(100.0, cls) == pytest.approx(2 ** cls.alpha)
    assert path_loss(LinkGeometry(30.0, 65.0, 25.0), cls) == pytest.approx(path_loss(50.0, cls))
    with pytest.raises(ValueError):
        path_loss(0.0, cls)


def test_link_geometry():
    g = LinkGeometry(np.array([0.0, 30.0]), 65.0, 25.0)
    assert np.allclose(g.d_3d, [40.0, 50.0])
    assert np.all(g.d_3d >= abs(g.h_xy))


# --- antenna -----------------------------------------------------------------

@pytest.mark.invariant
def test_array_factor_peak_at_tilt():
    ant = AntennaParams()
    assert array_factor(ant.downtilt_rad, ant) == pytest.approx(8.0)
    th = np.linspace(0, math.pi, 200001)
    assert th[np.argmax(array_factor(th, ant))] == pytest.approx(ant.downtilt_rad, abs=1e-4)
    # peak location does not move when the element gain is rescaled
    big = AntennaParams(element_peak_gain=100.0)
    g1, g2 = bs_antenna_gain(th, ant), bs_antenna_gain(th, big)
    assert np.argmax(g1) == np.argmax(g2)


def test_antenna_nulls_and_single_element():
    ant = AntennaParams()
    assert bs_antenna_gain(0.0, ant) == pytest.approx(0.0, abs=1e-30)
    assert bs_antenna_gain(math.pi, ant) == pytest.approx(0.0, abs=1e-30)
    one = AntennaParams(n_elements=1)
    assert np.allclose(array_factor(np.linspace(0, math.pi, 101), one), 1.0)


@pytest.mark.invariant
def test_antenna_continuous_at_tilt():
    ant = AntennaParams()
    ref = ant.n_elements * element_gain(ant.downtilt_rad, ant)
    for d in (1e-6, -1e-6):
        assert abs(bs_antenna_gain(ant.downtilt_rad + d, ant) - ref) < 1e-3 * ref


def test_zenith_angles(params):
    assert zenith_angle_at_bs(0.0, 100.0, 25.0) == pytest.approx(0.0)
    assert zenith_angle_at_bs(40.0, 25.0, 25.0) == pytest.approx(math.pi / 2)
    assert math.degrees(zenith_angle_at_bs(75 * math.sqrt(3), 100.0, 25.0)) == pytest.approx(60.0)
    assert zenith_angle_at_bs(LinkGeometry(10.0, 1.5, 25.0)) > math.pi / 2
    with pytest.raises(ValueError):
        zenith_angle_at_bs(0.0, 25.0, 25.0)


def test_bs_gain_at_matches_angle_route(params):
    r = np.linspace(0.5, 8000, 4001)
    for h in (1.5, 50.0, 100.0, 150.0):
        direct = bs_antenna_gain(zenith_angle_at_bs(r, h, params.h_b), params.antenna)
        # absolute scale: values near array nulls lose relative precision either way
        assert np.allclose(bs_gain_at(r, h, params), direct, rtol=1e-9, atol=1e-12)


# --- fading ------------------------------------------------------------------

def test_fading_cdf_exponential_median():
    assert fading_cdf(math.log(2), 1) == pytest.approx(0.5)


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_fading_unit_mean(m):
    x = sample_fading(m, np.random.default_rng(m), 10**6)
    assert abs(x.mean() - 1.0) < 0.005


def test_fading_m3_cdf_points():
    x = sample_fading(3, np.random.default_rng(3), 10**6)
    for w in (0.5, 1.0, 2.0):
        assert abs(np.mean(x <= w) - fading_cdf(w, 3)) < 0.01


@pytest.mark.invariant
@pytest.mark.parametrize("m", [1, 2, 4])
def test_fading_ks(m):
    x = sample_fading(LinkClass("uu", "L", 2.2, 34.0, m), np.random.default_rng(10 + m), 10**6)
    d = stats.kstest(x, lambda w: fading_cdf(w, m)).statistic
    assert d < 0.005


def test_fading_cdf_is_gamma():
    w = np.linspace(0, 6, 50)
    for m in (1, 2, 3, 6):
        assert np.allclose(fading_cdf(w, m), stats.gamma.cdf(w, m, scale=1 / m))


# --- large-scale fading and power control --------------------------------------

def test_large_scale_fading(params):
    cls = params.link("uu", "L")
    g = LinkGeometry(120.0, 100.0, 100.0)
    assert large_scale_fading(g, cls) == pytest.approx(path_loss(120.0, cls))
    bs = LinkGeometry(75 * math.sqrt(3), 100.0, 25.0)
    cls_b = params.link("ub", "L")
    gain = bs_antenna_gain(math.radians(60), params.antenna)
    assert large_scale_fading(bs, cls_b, params.antenna) == pytest.approx(path_loss(150.0, cls_b) / gain)
    r = np.linspace(1, 3000, 300)
    z = large_scale_fading(LinkGeometry(r, 100.0, 100.0), cls)
    assert np.all(np.diff(z) >= 0)


def test_transmit_power_examples():
    pc = PowerControlParams(epsilon_u=0.0)
    assert transmit_power(np.array([1e3, 1e9]), pc, "u") == pytest.approx(dbm_to_watt(-58.0))
    pc1 = PowerControlParams(epsilon_u=1.0)
    assert watt_to_dbm(transmit_power(10.0 ** 10, pc1, "u")) == pytest.approx(24.0)
    pc2 = PowerControlParams(p_max_dbm_u=-70.0)
    assert transmit_power(1e8, pc2, "u") == pytest.approx(dbm_to_watt(-70.0))
    with pytest.raises(ValueError):
        transmit_power(0.0, pc, "u")


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(-80, 0), st.floats(-10, 30))
def test_transmit_power_monotone_and_clamped(eps, rho, pmax):
    pc = PowerControlParams(p_max_dbm_g=pmax, rho_dbm_g=rho, epsilon_g=eps)
    z = np.logspace(0, 16, 200)
    p = transmit_power(z, pc, "g")
    assert np.all(np.diff(p) >= 0)
    assert np.all(p <= dbm_to_watt(pmax) * (1 + 1e-12))


def test_serving_power_uses_own_link(params):
    # GUE power follows its BS link (gain included); UAV power its U2U link
    r = 150.0
    z_gb = large_scale_fading(LinkGeometry(r, params.h_g, params.h_b), params.link("gb", "L"), params.antenna)
    assert serving_power("gb", "L", r, params) == pytest.approx(transmit_power(z_gb, params.power_control, "g"))
    z_uu = path_loss(r, params.link("uu", "L"))
    assert serving_power("uu", "L", r, params) == pytest.approx(transmit_power(z_uu, params.power_control, "u"))
