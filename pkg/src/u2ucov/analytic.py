"""Closed-form coverage of the U2U link and of the GUE uplink.

The aggregate interference at a typical receiver enters through its Laplace
transform L(s) = exp(eta(s)), where eta sums per-class interference
integrals.  Each integral averages the annulus kernel
(:func:`u2ucov.special.psi_difference`) over the cells of the LoS step
function and over the interferer's own serving distance, which sets its
fractional-power-control transmit power.

Victims are ``"u"`` (typical UAV receiver) or ``"b"`` (typical BS);
sources are ``"u"`` (U2U transmitters) or ``"g"`` (active GUEs).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad_vec
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar

from .channel import bs_gain_at, los_step_table, serving_power, serving_zeta
from .config import CONDITIONS, ScenarioParams
from .special import _psi_parts, psi_constant, psi_difference

# kernel evaluations per vectorized block
_BLOCK = 300_000
# eta grid: points per decade of s and the -eta window worth tabulating
TABLE_PER_DECADE = 16
# log-u grid density for interpolated step sums
TAIL_PER_DECADE = 24
_ETA_FLOOR = 1e-12
_ETA_CEIL = 800.0
QUAD_EPSABS = 1e-6
# log of exp(-N0 s) L(s) below which the conditional coverage is taken as 0
_LOG_NEGLIGIBLE = -600.0

# bumped by laplacian_derivatives; lets tests assert the m = 1 path skips it
derivative_calls = 0


class NumericalError(ArithmeticError):
    """An analytic evaluation failed to reach its tolerance."""


# ---------------------------------------------------------------------------
# grids and serving-distance quadratures

@dataclass(frozen=True)
class CellGrid:
    """Annuli [lo, hi) over which LoS probability and victim gain are constant."""

    lo: np.ndarray
    hi: np.ndarray
    p_los: np.ndarray
    gain: np.ndarray
    h_xy: float

    def p(self, condition: str) -> np.ndarray:
        return self.p_los if condition == "L" else 1.0 - self.p_los

    def __len__(self):
        return len(self.lo)


def _cos_splits(lo: float, hi: float, dh: float, step: float) -> np.ndarray:
    """Interior radii splitting [lo, hi) into pieces where |cos(zenith)| moves by <= step."""
    if dh == 0:
        return np.empty(0)
    a = abs(dh)
    c_lo = a / math.hypot(lo, a)
    c_hi = 0.0 if math.isinf(hi) else a / math.hypot(hi, a)
    n = int(math.ceil((c_lo - c_hi) / step))
    if n <= 1:
        return np.empty(0)
    cs = np.linspace(c_lo, c_hi, n + 1)[1:-1]
    cs = cs[cs > 0]
    return a * np.sqrt(1.0 / (cs * cs) - 1.0)


def _cell_gain(lo, hi, h_x: float, h_y: float, params: ScenarioParams) -> np.ndarray:
    if params.analytic.gain_point == "left":
        return bs_gain_at(lo, h_x, params)
    a = abs(h_x - h_y)
    if a == 0:
        return bs_gain_at(0.5 * (lo + hi), h_x, params)
    c = 0.5 * (a / np.hypot(lo, a) + a / np.hypot(hi, a))
    return bs_gain_at(a * np.sqrt(1.0 / (c * c) - 1.0), h_x, params)


def cell_grid(link_type: str, params: ScenarioParams) -> CellGrid:
    """Cells of the interference step sum for ``link_type`` (source + victim letter).

    The grid follows the LoS step table out to its truncation radius; the
    last value then persists up to the field radius.  Links ending at a BS
    keep the cell width all the way out and are split further so that
    cos(zenith) moves by at most ``analytic.gain_cos_step`` per cell.  The
    BS gain is held constant per cell, read at the cos(zenith) midpoint or,
    with ``analytic.gain_point = "left"``, at the inner edge.
    """
    h_x, h_y = params.heights(link_type)
    table = los_step_table(link_type, params)
    R = params.field_radius
    lo = table.breakpoints[table.breakpoints < R]
    p = table.p_los[: len(lo)]
    if link_type[1] == "b":
        # past the table the LoS value is frozen but the gain is not: keep
        # the cell width, otherwise one far cell would carry a single gain
        lo = np.arange(0.0, R, params.los_cell_width)
        p = table(lo)
        hi = np.append(lo[1:], R)
        step = params.analytic.gain_cos_step
        pieces = [np.concatenate(([a], _cos_splits(a, b, h_x - h_y, step))) for a, b in zip(lo, hi)]
        p = np.concatenate([np.full(len(pc), pv) for pc, pv in zip(pieces, p)])
        lo = np.concatenate(pieces)
        gain = _cell_gain(lo, np.append(lo[1:], R), h_x, h_y, params)
    else:
        gain = np.ones_like(lo)
    return CellGrid(lo, np.append(lo[1:], R), p, gain, h_x - h_y)


def rayleigh_pdf(r, sigma: float, r_max: float = math.inf):
    """Rayleigh density of scale ``sigma``, optionally truncated (and renormalized) at ``r_max``."""
    r = np.asarray(r, dtype=float)
    norm = -math.expm1(-r_max * r_max / (2.0 * sigma * sigma)) if math.isfinite(r_max) else 1.0
    pdf = r / (sigma * sigma) * np.exp(-r * r / (2.0 * sigma * sigma)) / norm
    return np.where(r < r_max, pdf, 0.0)


def serving_link(role: str) -> str:
    return "uu" if role == "u" else "gb"


def serving_density(role: str, params: ScenarioParams) -> tuple[Callable, float]:
    """(pdf, integration upper limit) of a node's serving distance.

    UAVs: truncated Rayleigh(sigma_u) on [0, r_M], cut at 9 sigma_u when
    r_M is larger (neglected mass e^-40).  GUEs: Rayleigh(sigma_g) on
    [0, 8 sigma_g] (neglected mass e^-32).
    """
    if role == "u":
        s, rm = params.sigma_u, params.r_max
        return (lambda r: rayleigh_pdf(r, s, rm)), min(rm, 9.0 * s)
    s = params.sigma_g
    return (lambda r: rayleigh_pdf(r, s)), 8.0 * s


def _gain_nulls(upper: float, params: ScenarioParams, n_scan: int = 50_000) -> np.ndarray:
    """Local minima of the BS gain seen by a GUE at serving distance in (0, upper)."""
    h = params.h_g
    r = np.linspace(0.0, upper, n_scan + 1)[1:]
    g = bs_gain_at(r, h, params)
    idx = np.nonzero((g[1:-1] < g[:-2]) & (g[1:-1] <= g[2:]))[0] + 1
    out = []
    for i in idx:
        res = minimize_scalar(lambda x: float(bs_gain_at(x, h, params)), bounds=(r[i - 1], r[i + 1]),
                              method="bounded", options={"xatol": 1e-10})
        out.append(res.x)
    return np.array(out)


def _power_kinks(link: str, upper: float, params: ScenarioParams, n_scan: int = 20_000) -> np.ndarray:
    """Serving distances where the fractional power has kinks or spikes.

    These are the crossings of rho zeta^eps with P_max and, for GUEs, the
    nulls of the BS gain, near which the power grows like a negative power
    of the distance to the null until it clamps.  Around each null the
    points are graded geometrically from the clamp edge outwards.
    """
    p_max, rho, eps = params.power_control.for_role(link[0])
    nulls = _gain_nulls(upper, params) if link == "gb" else np.empty(0)
    scan = np.unique(np.concatenate((np.linspace(0.0, upper, n_scan + 1)[1:], nulls)))
    out = [nulls]
    if eps == 0:
        return nulls
    for nu in CONDITIONS:
        def excess(x, nu=nu):
            with np.errstate(divide="ignore"):
                return eps * np.log(serving_zeta(link, nu, x, params)) + math.log(rho / p_max)
        e = excess(scan)
        flip = np.nonzero(np.diff(np.sign(e)) != 0)[0]
        out.append(np.array([brentq(lambda x: float(excess(x)), scan[i], scan[i + 1], xtol=1e-12)
                             for i in flip if np.isfinite(e[i]) and np.isfinite(e[i + 1])]))
    kinks = np.concatenate(out)
    graded = []
    for x0 in nulls:
        near = kinks[kinks != x0]
        gap = np.min(np.abs(near - x0)) if near.size else 1e-3
        gap = min(max(gap, 1e-6), 1.0)
        steps = gap * 2.0 ** np.arange(0, int(math.log2(10.0 / gap)) + 1)
        graded += [x0 - steps, x0 + steps]
    return np.concatenate([kinks] + graded)


def serving_breakpoints(role: str, upper: float, params: ScenarioParams, cos_step: float | None = None) -> np.ndarray:
    """Points in (0, upper) where a serving-link integrand has kinks or fast variation.

    These are the LoS steps, the P_max clamp transitions of the power
    control and, for GUEs, cos(zenith) pieces resolving the BS gain.
    """
    link = serving_link(role)
    w = params.los_cell_width
    edges = np.arange(0.0, upper, w)
    pts = [edges, _power_kinks(link, upper, params)]
    if link == "gb":
        h_x, h_y = params.heights(link)
        step = cos_step if cos_step is not None else 5.0 * params.analytic.gain_cos_step
        pts += [_cos_splits(a, min(a + w, upper), h_x - h_y, step) for a in edges]
    out = np.unique(np.concatenate(pts))
    return out[(out > 0) & (out < upper)]


@dataclass(frozen=True)
class ServingQuadrature:
    """Gauss-Legendre rule over an interferer's serving distance.

    ``weight`` includes the distance density, so that
    sum over nu of sum(weight * p(nu)) is 1.
    """

    x: np.ndarray
    weight: np.ndarray
    p_los: np.ndarray
    power: dict

    def p(self, condition: str) -> np.ndarray:
        return self.p_los if condition == "L" else 1.0 - self.p_los


def serving_quadrature(role: str, params: ScenarioParams, nodes_per_panel: int = 6) -> ServingQuadrature:
    link = serving_link(role)
    pdf, upper = serving_density(role, params)
    edges = np.concatenate(([0.0], serving_breakpoints(role, upper, params), [upper]))
    t, wt = leggauss(nodes_per_panel)
    a, b = edges[:-1, None], edges[1:, None]
    x = (0.5 * (b - a) * t + 0.5 * (a + b)).ravel()
    w = (0.5 * (b - a) * wt).ravel() * pdf(x)
    table = los_step_table(link, params, radius=upper + params.los_cell_width)
    power = {nu: serving_power(link, nu, x, params) for nu in CONDITIONS}
    return ServingQuadrature(x, w, table(x), power)


# ---------------------------------------------------------------------------
# interference integrals

@dataclass(frozen=True)
class InterferenceSpec:
    """One interfering population as seen from a typical victim.

    ``associated`` marks GUEs interfering at a BS.  Their non-homogeneous
    density lambda_b (1 - exp(-lambda_b pi r^2)) is realized by letting a
    GUE whose serving distance is x radiate only from r > x.
    """

    source: str
    victim: str
    density: float
    grid: CellGrid
    serving: ServingQuadrature
    classes: dict
    params: ScenarioParams = field(repr=False)

    @property
    def link_type(self) -> str:
        return self.source + self.victim

    @property
    def associated(self) -> bool:
        return self.source == "g" and self.victim == "b"

    def __post_init__(self):
        if self.density < 0:
            raise ValueError("interferer density must be nonnegative")
        mass = float(sum(np.sum(self.serving.weight * self.serving.p(nu)) for nu in CONDITIONS))
        if abs(mass - 1.0) > 1e-6:
            raise NumericalError(f"serving-distance rule integrates to {mass}, not 1")


def interference_spec(source: str, victim: str, params: ScenarioParams,
                      density: float | None = None) -> InterferenceSpec:
    """Build the InterferenceSpec for ``source`` interferers at a ``victim`` receiver.

    ``density`` overrides the scenario density (lambda_u for UAVs,
    lambda_b for GUEs, one active GUE per cell).
    """
    link = source + victim
    if density is None:
        density = params.lambda_u if source == "u" else params.lambda_b
    return InterferenceSpec(
        source=source,
        victim=victim,
        density=float(density),
        grid=cell_grid(link, params),
        serving=serving_quadrature(source, params),
        classes={xi: params.link(link, xi) for xi in CONDITIONS},
        params=params,
    )


def _cell_terms(g: CellGrid, p: np.ndarray, u: np.ndarray, m: int, beta: float) -> np.ndarray:
    """p_k [Psi(u g_k, hi_k) - Psi(u g_k, lo_k)] for every (u, cell) pair."""
    if np.all(g.gain == 1.0):
        edges = np.append(g.lo, g.hi[-1])
        inf_last = math.isinf(edges[-1])
        ev = edges[:-1] if inf_last else edges
        core, far = _psi_parts(u[:, None], ev[None, :], g.h_xy, m, beta)
        if inf_last:
            core = np.concatenate([core, np.zeros((len(u), 1))], axis=1)
            far = np.concatenate([far, np.zeros((len(u), 1), bool)], axis=1)
        vals = np.diff(core, axis=1) - np.diff(far.astype(float), axis=1) * psi_constant(u, m, beta)[:, None]
    else:
        vals = psi_difference(u[:, None] * g.gain, g.lo, g.hi, g.h_xy, m, beta)
    return vals * p


def _tail_table(g: CellGrid, p: np.ndarray, u_lo: float, u_hi: float, m: int, beta: float):
    """Log-log cubic splines in u of the tail sums sum_{j >= k} over cells, one column per k."""
    n = max(4, int(math.ceil(math.log10(u_hi / u_lo) * TAIL_PER_DECADE)) + 1)
    grid = np.geomspace(u_lo, u_hi, n)
    terms = np.concatenate([_cell_terms(g, p, grid[i:i + 256], m, beta) for i in range(0, n, 256)])
    tails = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    alive = tails[-1] > 0
    with np.errstate(divide="ignore"):
        spline = CubicSpline(np.log(grid), np.log(np.where(alive, tails, 1.0)), axis=0)
    return spline, alive


def _eval_columns(spline: CubicSpline, alive: np.ndarray, u: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Evaluate column ``col[i]`` of ``spline`` at ``u[i]`` (u > 0)."""
    x = np.log(u)
    bp = spline.x
    i = np.clip(np.searchsorted(bp, x, side="right") - 1, 0, len(bp) - 2)
    dx = x - bp[i]
    c = spline.c
    y = ((c[0, i, col] * dx + c[1, i, col]) * dx + c[2, i, col]) * dx + c[3, i, col]
    return np.where(alive[col], np.exp(y), 0.0)


def _step_sum(spec: InterferenceSpec, xi: str, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum over cells of p^xi [Psi(r_hi) - Psi(r_lo)] for scales ``u`` = s P / tau_hat.

    ``x`` holds the interferer serving distance of each entry (used only
    for associated GUEs, whose sum starts at x).  When there are more
    entries than points of a log-u grid, the sums are interpolated from
    that grid; they are smooth in log u.
    """
    g = spec.grid
    cls = spec.classes[xi]
    m, beta = cls.m_fading, cls.beta
    p = g.p(xi)
    out = np.zeros(len(u))
    if not np.any(p > 0):
        return out
    if spec.associated:
        k = np.clip(np.searchsorted(g.lo, x, side="right") - 1, 0, len(g) - 1)
        first = k + 1  # cells lying entirely beyond x
    else:
        first = np.zeros(len(u), dtype=int)
    pos = u > 0
    up = u[pos]
    if up.size:
        u_lo, u_hi = up.min() / 1.01, up.max() * 1.01
        n_grid = math.log10(u_hi / u_lo) * TAIL_PER_DECADE + 4
        if up.size > 2 * n_grid:
            spline, alive = _tail_table(g, p, u_lo, u_hi, m, beta)
            col = first[pos]
            inside = col < len(g)
            vals = np.zeros(up.size)
            vals[inside] = _eval_columns(spline, alive, up[inside], col[inside])
            out[pos] = vals
        else:
            idx = np.nonzero(pos)[0]
            rows = max(1, _BLOCK // len(g))
            for st in range(0, len(idx), rows):
                sel = idx[st:st + rows]
                terms = _cell_terms(g, p, u[sel], m, beta)
                out[sel] = np.where(np.arange(len(g))[None, :] >= first[sel, None], terms, 0.0).sum(axis=1)
    if spec.associated:
        # partial cell containing x runs from x, with its gain re-read on [x, hi)
        hk = np.maximum(g.hi[k], x)
        gx = _cell_gain(x, hk, *spec.params.heights(spec.link_type), spec.params)
        part = psi_difference(u * gx, x, hk, g.h_xy, m, beta)
        out = out + p[k] * part
    return out


def interference_integral(spec: InterferenceSpec, xi: str, s) -> np.ndarray:
    """I^xi(s): serving-averaged step sum for one interference condition.

    Returns an array shaped like ``s``; ``s = 0`` gives 0.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("Laplace variable must be nonnegative")
    flat = s.ravel()
    cls = spec.classes[xi]
    sv = spec.serving
    out = np.zeros(len(flat))
    for nu in CONDITIONS:
        w = sv.weight * sv.p(nu)
        keep = w > 0
        P, x, w = sv.power[nu][keep], sv.x[keep], w[keep]
        u = (flat[:, None] * P[None, :] / cls.tau_hat).ravel()
        xs = np.broadcast_to(x, (len(flat), len(x))).ravel()
        vals = _step_sum(spec, xi, u, xs).reshape(len(flat), len(x))
        out += vals @ w
    return out.reshape(s.shape)


def _victim_specs(victim: str, params: ScenarioParams, lambda_u=None, lambda_b=None):
    return [interference_spec(src, victim, params, density=d)
            for src, d in (("u", lambda_u), ("g", lambda_b))]


def log_laplacian(specs, s) -> np.ndarray:
    """eta(s) = -2 pi sum_specs lambda sum_xi I^xi(s)."""
    s = np.asarray(s, dtype=float)
    acc = np.zeros(s.shape)
    for spec in specs:
        if spec.density == 0:
            continue
        for xi in CONDITIONS:
            acc = acc + spec.density * interference_integral(spec, xi, s)
    return -2.0 * math.pi * acc


def laplacian_u2u(s, params: ScenarioParams, lambda_u: float | None = None,
                  lambda_b: float | None = None):
    """Laplace transform of the aggregate interference at a typical UAV receiver."""
    return np.exp(log_laplacian(_victim_specs("u", params, lambda_u, lambda_b), s))


def laplacian_gue(s, params: ScenarioParams, lambda_u: float | None = None,
                  lambda_b: float | None = None):
    """Laplace transform of the aggregate interference at a typical BS.

    ``s`` is the Laplace variable of the received interference power, so
    every interferer enters with the BS gain of its cell.
    """
    return np.exp(log_laplacian(_victim_specs("b", params, lambda_u, lambda_b), s))


def far_field_tail(spec: InterferenceSpec, s) -> np.ndarray:
    """Contribution to sum_xi I^xi(s) from beyond the field radius (LoS value and gain frozen)."""
    g = spec.grid
    R = g.hi[-1]
    if math.isinf(R):
        return np.zeros(np.shape(s))
    tail_gain = float(bs_gain_at(R, spec.params.heights(spec.link_type)[0], spec.params)) \
        if spec.victim == "b" else 1.0
    tail = CellGrid(np.array([R]), np.array([math.inf]), g.p_los[-1:], np.array([tail_gain]), g.h_xy)
    t_spec = InterferenceSpec(spec.source, spec.victim, spec.density, tail, spec.serving,
                              spec.classes, spec.params)
    return sum(interference_integral(t_spec, xi, s) for xi in CONDITIONS)


# ---------------------------------------------------------------------------
# tabulated eta

class LaplaceTable:
    """eta(s) tabulated as a cubic spline of log(-eta) against log(s).

    Outside the table the end slopes are continued (power-law tails), which
    is the exact asymptotic shape of eta for both small and large s.
    """

    def __init__(self, s_grid: np.ndarray, eta_values: np.ndarray):
        s_grid = np.asarray(s_grid, dtype=float)
        neg = -np.asarray(eta_values, dtype=float)
        self.zero = bool(np.all(neg <= 0))
        self.s_grid = s_grid
        if self.zero:
            return
        if np.any(neg <= 0):
            raise NumericalError("eta must be strictly negative over the table")
        self._x = np.log(s_grid)
        self._spline = CubicSpline(self._x, np.log(neg))
        self._slope = self._spline(self._x[[0, -1]], 1)

    @classmethod
    def build(cls, specs, s_samples, per_decade: int = TABLE_PER_DECADE) -> "LaplaceTable":
        """Tabulate eta over the range of ``s_samples`` where it matters.

        The range is trimmed to floor < -eta < ceil (beyond it L is 1 or 0 to
        double precision) using a coarse per-decade pass.
        """
        eta = lambda s: log_laplacian(specs, s)  # noqa: E731
        s = np.asarray(s_samples, dtype=float)
        s = s[np.isfinite(s) & (s > 0)]
        if not any(sp.density > 0 for sp in specs) or s.size == 0:
            return cls(np.array([1.0, 10.0]), np.zeros(2))
        # one spare decade each side keeps finite-difference stencils off the tails
        k_lo, k_hi = math.floor(math.log10(s.min())) - 1, math.ceil(math.log10(s.max())) + 1
        coarse = 10.0 ** np.arange(k_lo, k_hi + 1)
        ce = -eta(coarse)
        lo_i = max(0, int(np.searchsorted(ce, _ETA_FLOOR)) - 1)
        hi_i = min(len(coarse) - 1, int(np.searchsorted(ce, _ETA_CEIL)) + 1)
        if hi_i <= lo_i:
            hi_i = lo_i + 1
            coarse = np.append(coarse, coarse[-1] * 10.0)
        n = (hi_i - lo_i) * per_decade + 1
        grid = np.logspace(math.log10(coarse[lo_i]), math.log10(coarse[hi_i]), n)
        return cls(grid, eta(grid))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.zero:
            return np.zeros(s.shape)
        out = np.zeros(s.shape)
        pos = s > 0
        with np.errstate(divide="ignore"):
            x = np.log(np.where(pos, s, 1.0))
        x0, x1 = self._x[0], self._x[-1]
        y = self._spline(np.clip(x, x0, x1))
        y = np.where(x < x0, self._spline(x0) + self._slope[0] * (x - x0), y)
        y = np.where(x > x1, self._spline(x1) + self._slope[1] * (x - x1), y)
        with np.errstate(over="ignore"):
            val = -np.exp(y)
        out = np.where(pos, val, 0.0)
        out = np.where(np.isinf(s), -np.inf, out)
        return out


# ---------------------------------------------------------------------------
# derivatives of L = exp(eta)

@dataclass(frozen=True)
class DerivativeResult:
    values: np.ndarray   # D^0 .. D^order of L, shape (order + 1, *s.shape)
    errors: np.ndarray   # error estimate per order


def _richardson_derivative(f: Callable, s: np.ndarray, k: int, rel_step: float, levels: int = 4):
    """k-th derivative by central differences with Romberg extrapolation in h^2."""
    h0 = rel_step * s / max(k, 1)
    table = []
    for lev in range(levels):
        h = h0 / 2 ** lev
        acc = np.zeros_like(s)
        for j in range(k + 1):
            acc = acc + (-1) ** j * math.comb(k, j) * f(s + (0.5 * k - j) * h)
        row = [acc / h ** k]
        for i in range(1, lev + 1):
            fac = 4.0 ** i
            row.append((fac * row[i - 1] - table[lev - 1][i - 1]) / (fac - 1.0))
        table.append(row)
    best = table[-1][-1]
    err = np.abs(best - table[-2][-2])
    return best, err


def laplacian_derivatives(log_laplacian: Callable, s, order: int, rel_step: float = 0.2,
                          max_rel_err: float = 1e-4) -> DerivativeResult:
    """Derivatives D^0..D^order of L = exp(eta) at ``s``.

    Derivatives of eta come from Richardson-extrapolated central
    differences on a relative step grid; the exponential is composed with
    them through complete Bell polynomials (Faa di Bruno).  Raises
    :class:`NumericalError` if an extrapolated derivative's error estimate
    exceeds ``max_rel_err`` relative.
    """
    global derivative_calls
    derivative_calls += 1
    if order < 0:
        raise ValueError("order must be nonnegative")
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("derivatives need s > 0")
    eta0 = np.asarray(log_laplacian(s), dtype=float)
    L = np.exp(eta0)
    d_eta, d_err = [], []
    for k in range(1, order + 1):
        val, err = _richardson_derivative(log_laplacian, s, k, rel_step)
        scale = np.maximum(np.abs(val), 1e-300)
        if np.any(err > max_rel_err * scale):
            raise NumericalError(f"unstable extrapolation for derivative order {k}")
        d_eta.append(val)
        d_err.append(err)
    # complete Bell polynomials: B_{n+1} = sum_k C(n,k) B_{n-k} x_{k+1}
    bell = [np.ones_like(s)]
    for n in range(order):
        bell.append(sum(math.comb(n, k) * bell[n - k] * d_eta[k] for k in range(n + 1)))
    values = np.array([L * b for b in bell])
    errors = np.array([np.zeros_like(s)] + [L * e for e in d_err])
    return DerivativeResult(values, errors)


# ---------------------------------------------------------------------------
# coverage

@dataclass
class CoverageResult:
    """Coverage P(SINR > T) on a threshold grid, split by serving condition."""

    thresholds_db: np.ndarray
    coverage: np.ndarray
    los_branch: np.ndarray
    nlos_branch: np.ndarray
    quad_err: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_db", "coverage", "coverage_los_branch", "coverage_nlos_branch", "quad_err"])
            for row in zip(self.thresholds_db, self.coverage, self.los_branch, self.nlos_branch, self.quad_err):
                w.writerow([f"{row[0]:.6g}"] + [f"{v:.10g}" for v in row[1:]])


def _threshold_grid(T_grid) -> np.ndarray:
    t = np.atleast_1d(np.asarray(T_grid, dtype=float))
    if t.ndim != 1 or t.size == 0 or np.any(np.isnan(t)):
        raise ValueError("threshold grid must be a non-empty 1-D array of dB values")
    return t


def _serving_s(link: str, nu: str, r, T_lin, params: ScenarioParams, m: int):
    """Laplace argument s = m T zeta / P of the typical serving link, shape (len(r), len(T))."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    zeta = serving_zeta(link, nu, r, params)
    p_max, rho, eps = params.power_control.for_role(link[0])
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if link == "gb" and params.analytic.exact_theorem2:
            ratio = zeta ** (1.0 - eps) / rho
        else:
            ratio = zeta / np.minimum(p_max, rho * zeta ** eps)
        ratio = np.where(zeta == 0, 0.0, ratio)
    return m * ratio[:, None] * T_lin[None, :]


def _conditional_coverage(s, eta_fn: Callable, noise: float, m: int):
    """sum_i (-1)^i q_i D^i L(s); for m = 1 simply exp(-N0 s + eta(s))."""
    finite = np.isfinite(s) & (s > 0)
    out = np.where(s == 0, 1.0, 0.0)
    if not np.any(finite):
        return out
    sf = s[finite]
    if m == 1:
        with np.errstate(under="ignore"):
            out[finite] = np.exp(-noise * sf + eta_fn(sf))
        return out
    # where exp(-N0 s) L(s) underflows, every term of the sum is negligible
    live = -noise * sf + eta_fn(sf) > _LOG_NEGLIGIBLE
    total = np.zeros_like(sf)
    if np.any(live):
        sl = sf[live]
        D = laplacian_derivatives(eta_fn, sl, m - 1).values
        e = np.exp(-noise * sl)
        acc = np.zeros_like(sl)
        for i in range(m):
            q = sum(noise ** (j - i) * sl ** j / math.factorial(j - i) for j in range(i, m))
            acc += (-1) ** i * e * q / math.factorial(i) * D[i]
        total[live] = acc
    out[finite] = np.clip(total, 0.0, 1.0)
    return out


def _coverage(victim: str, params: ScenarioParams, T_grid, lambda_u=None, lambda_b=None,
              table: LaplaceTable | None = None) -> CoverageResult:
    T_db = _threshold_grid(T_grid)
    T_lin = 10.0 ** (T_db / 10.0)
    role = "u" if victim == "u" else "g"
    link = serving_link(role)
    pdf, upper = serving_density(role, params)
    los = los_step_table(link, params, radius=upper + params.los_cell_width)
    ms = {nu: params.link(link, nu).m_fading for nu in CONDITIONS}
    noise = params.noise_w
    specs = _victim_specs(victim, params, lambda_u, lambda_b)

    if table is None:
        r_probe = np.linspace(0.0, upper, 2001)[1:]
        probe = np.concatenate([_serving_s(link, nu, r_probe, T_lin, params, ms[nu]).ravel()
                                for nu in CONDITIONS])
        table = LaplaceTable.build(specs, probe)

    nT = len(T_lin)

    def integrand(r):
        pl = float(los(r))
        f = float(pdf(r))
        parts = []
        for nu, pw in (("L", pl), ("N", 1.0 - pl)):
            if pw * f == 0.0:
                parts.append(np.zeros(nT))
                continue
            s = _serving_s(link, nu, r, T_lin, params, ms[nu])[0]
            parts.append(pw * f * _conditional_coverage(s, table, noise, ms[nu]))
        return np.concatenate(parts)

    points = serving_breakpoints(role, upper, params)
    val, err, info = quad_vec(integrand, 0.0, upper, epsabs=QUAD_EPSABS, epsrel=1e-10,
                              norm="max", points=points, limit=20000, full_output=True)
    if not info.success:
        raise NumericalError(f"coverage quadrature did not converge (error {err:.2e})")
    los_b, nlos_b = val[:nT], val[nT:]
    cov = np.clip(los_b + nlos_b, 0.0, 1.0)
    s_ref = float(np.median(table.s_grid))
    eta_ref = float(log_laplacian(specs, s_ref))
    tail_ref = float(-2.0 * math.pi * sum(sp.density * far_field_tail(sp, s_ref) for sp in specs))
    diagnostics = {
        "victim": victim,
        "neval": int(info.neval),
        "table_points": int(len(table.s_grid)),
        "table_s_range": (float(table.s_grid[0]), float(table.s_grid[-1])),
        "field_radius_m": float(params.field_radius),
        "eta_at_s_ref": eta_ref,
        "eta_tail_beyond_field": tail_ref,
        "s_ref": s_ref,
    }
    return CoverageResult(T_db, cov, los_b, nlos_b, np.full(nT, float(err)), diagnostics)


def coverage_u2u(params: ScenarioParams, T_grid=None, lambda_u: float | None = None,
                 lambda_b: float | None = None) -> CoverageResult:
    """U2U link coverage P(SINR_u > T) for thresholds ``T_grid`` in dB."""
    T = params.sinr_threshold_db if T_grid is None else T_grid
    return _coverage("u", params, T, lambda_u, lambda_b)


def coverage_gue(params: ScenarioParams, T_grid=None, lambda_u: float | None = None,
                 lambda_b: float | None = None) -> CoverageResult:
    """GUE uplink coverage P(SINR_g > T) at the typical BS for thresholds in dB."""
    T = params.sinr_threshold_db if T_grid is None else T_grid
    return _coverage("b", params, T, lambda_u, lambda_b)


def threshold_crossing_db(thresholds_db, coverage, level: float = 0.5) -> float:
    """Threshold (dB) at which a non-increasing coverage curve crosses ``level``.

    Linear interpolation between grid points; nan if the curve never crosses.
    """
    t = np.asarray(thresholds_db, dtype=float)
    c = np.asarray(coverage, dtype=float)
    above = c >= level
    if not above.any() or above.all():
        return math.nan
    i = int(np.argmin(above)) - 1
    if i < 0:
        return math.nan
    c0, c1 = c[i], c[i + 1]
    return float(t[i] + (c0 - level) / (c0 - c1) * (t[i + 1] - t[i]))


__all__ = [
    "CellGrid", "CoverageResult", "DerivativeResult", "InterferenceSpec", "LaplaceTable",
    "NumericalError", "ServingQuadrature", "cell_grid", "coverage_gue", "coverage_u2u",
    "far_field_tail", "interference_integral", "interference_spec", "laplacian_derivatives",
    "laplacian_gue", "laplacian_u2u", "log_laplacian", "rayleigh_pdf", "serving_density",
    "serving_quadrature", "threshold_crossing_db",
]
