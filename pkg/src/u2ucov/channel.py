"""Per-link propagation: ITU LoS probability, path loss, BS antenna pattern,
Nakagami-m fading and fractional power control.

Every function accepts numpy arrays and broadcasts; scalars in give scalars
(or 0-d arrays) out.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AntennaParams, LinkClass, PowerControlParams, ScenarioParams

# guards floor() against round-off exactly at grid edges
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class LinkGeometry:
    """Horizontal distance and endpoint heights of a link (arrays allowed)."""

    r_2d: np.ndarray | float
    h_x: float
    h_y: float

    @property
    def h_xy(self):
        return self.h_x - self.h_y

    @property
    def d_3d(self):
        return np.hypot(self.r_2d, self.h_x - self.h_y)


@dataclass(frozen=True)
class LosStepFunction:
    """Piecewise-constant LoS probability on ``[breakpoints[i], breakpoints[i+1])``.

    Beyond the last breakpoint the final value persists.
    """

    breakpoints: np.ndarray
    p_los: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any((self.p_los < 0) | (self.p_los > 1)):
            raise ValueError("LoS probabilities must lie in [0, 1]")

    def __call__(self, r):
        idx = np.searchsorted(self.breakpoints, np.asarray(r, dtype=float), side="right") - 1
        return self.p_los[np.clip(idx, 0, len(self.p_los) - 1)]

    @property
    def spacing(self) -> float:
        return float(self.breakpoints[1] - self.breakpoints[0]) if len(self.breakpoints) > 1 else math.inf

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r_left_m", "p_los"])
            for r, p in zip(self.breakpoints, self.p_los):
                w.writerow([f"{r:.6f}", f"{p:.12g}"])


def _itu_product(n_buildings: int, h_x: float, h_y: float, a3: float) -> float:
    """ITU product over ``n_buildings`` = J + 1 factors."""
    if n_buildings <= 0:
        return 1.0
    j = np.arange(n_buildings)
    h = h_x - (j + 0.5) * (h_x - h_y) / n_buildings
    return float(np.prod(-np.expm1(-h * h / (2.0 * a3 * a3))))


def los_index(r_2d, a1: float, a2: float):
    """Upper index J of the ITU product, floor(r sqrt(a1 a2)/1000 - 1)."""
    r = np.asarray(r_2d, dtype=float)
    return np.floor(r * math.sqrt(a1 * a2) / 1000.0 - 1.0 + _EDGE_EPS).astype(int)


def los_probability(r_2d, h_x: float | None = None, h_y: float | None = None,
                    a1: float = 0.3, a2: float = 500.0, a3: float = 20.0):
    """ITU-R LoS probability for a link of horizontal length ``r_2d``.

    ``r_2d`` may be a :class:`LinkGeometry`, in which case the heights come
    from it.  The number of buildings crossed is J + 1 with J the product's
    upper index; J < 0 gives the empty product, 1.
    """
    if isinstance(r_2d, LinkGeometry):
        r_2d, h_x, h_y = r_2d.r_2d, r_2d.h_x, r_2d.h_y
    if h_x < 0 or h_y < 0:
        raise ValueError("heights must be non-negative")
    J = los_index(r_2d, a1, a2)
    uniq, inv = np.unique(J, return_inverse=True)
    vals = np.array([_itu_product(k + 1, h_x, h_y, a3) for k in uniq.ravel()])
    out = vals[inv].reshape(J.shape)
    return out if out.ndim else float(out)


def los_step_table(link_type: str, params: ScenarioParams, radius: float | None = None) -> LosStepFunction:
    """LoS step table of ``link_type`` on the uniform ITU grid.

    Cell ``i`` (0-based) covers ``[i w, (i+1) w)`` with ``w = 1000/sqrt(a1 a2)``;
    the ITU product is constant there, so the value is exact.
    """
    h_x, h_y = params.heights(link_type)
    w = params.los_cell_width
    radius = params.los_table_radius if radius is None else radius
    n = max(1, int(math.ceil(radius / w - _EDGE_EPS)))
    edges = np.arange(n) * w
    p = np.array([_itu_product(i, h_x, h_y, params.itu_a3) for i in range(n)])
    return LosStepFunction(edges, p)


def path_loss(d_3d, cls: LinkClass):
    """Linear path loss tau_hat * d^alpha; ``d_3d`` may be a :class:`LinkGeometry`."""
    if isinstance(d_3d, LinkGeometry):
        d_3d = d_3d.d_3d
    d = np.asarray(d_3d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("path loss undefined for co-located nodes (d_3d = 0)")
    return cls.tau_hat * d ** cls.alpha


def element_gain(theta, antenna: AntennaParams):
    return antenna.element_peak_gain * np.sin(theta) ** 2


def array_factor(theta, antenna: AntennaParams):
    """Normalized array factor of the vertical ULA; peak value N at the tilt."""
    n = antenna.n_elements
    u = 0.5 * math.pi * (np.cos(theta) - math.cos(antenna.downtilt_rad))
    su = np.sin(u)
    small = np.abs(su) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        af = np.sin(n * u) ** 2 / (n * su * su)
    return np.where(small, float(n), af)


def bs_antenna_gain(zenith_angle, antenna: AntennaParams):
    """Total BS gain g_E(theta) * g_A(theta), linear."""
    theta = np.asarray(zenith_angle, dtype=float)
    return element_gain(theta, antenna) * array_factor(theta, antenna)


def zenith_angle_at_bs(r_2d, h_other: float | None = None, h_b: float | None = None):
    """Zenith angle at the BS of a node at horizontal distance ``r_2d``.

    Measured from the upward vertical, so nodes below the BS give theta > pi/2.
    A :class:`LinkGeometry` with ``h_x`` the other node and ``h_y`` the BS
    is accepted in place of the three numbers.
    """
    if isinstance(r_2d, LinkGeometry):
        r_2d, h_other, h_b = r_2d.r_2d, r_2d.h_x, r_2d.h_y
    r = np.asarray(r_2d, dtype=float)
    d = np.hypot(r, h_other - h_b)
    if np.any(d <= 0):
        raise ValueError("zenith angle undefined for a node co-located with the BS")
    return np.arccos(np.clip((h_other - h_b) / d, -1.0, 1.0))


def bs_gain_at(r_2d, h_other: float, params: ScenarioParams):
    """BS gain towards a node at height ``h_other`` and horizontal distance ``r_2d``.

    Same value as ``bs_antenna_gain(zenith_angle_at_bs(...))``, computed from
    cos(theta) and sin^2(theta) directly.
    """
    r = np.asarray(r_2d, dtype=float)
    dh = h_other - params.h_b
    d2 = r * r + dh * dh
    if np.any(d2 <= 0):
        raise ValueError("zenith angle undefined for a node co-located with the BS")
    ant = params.antenna
    sin2 = r * r / d2
    u = 0.5 * math.pi * (dh / np.sqrt(d2) - math.cos(ant.downtilt_rad))
    su = np.sin(u)
    small = np.abs(su) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        af = np.sin(ant.n_elements * u) ** 2 / (ant.n_elements * su * su)
    return ant.element_peak_gain * sin2 * np.where(small, float(ant.n_elements), af)


def fading_cdf(omega, m: int):
    """CDF of unit-mean Nakagami-m power fading (gamma, shape m, rate m)."""
    w = np.asarray(omega, dtype=float)
    acc = np.zeros_like(w)
    term = np.ones_like(w)
    for i in range(m):
        if i:
            term = term * (m * w) / i
        acc = acc + term
    return 1.0 - acc * np.exp(-m * w)


def sample_fading(cls: LinkClass | int, rng: np.random.Generator, size=None):
    """Draw unit-mean gamma(m, 1/m) fading power gains."""
    m = cls if isinstance(cls, (int, np.integer)) else cls.m_fading
    if m == 1:
        return rng.standard_exponential(size)
    return rng.gamma(m, 1.0 / m, size)


def large_scale_fading(geometry: LinkGeometry, cls: LinkClass, antenna: AntennaParams | None = None):
    """zeta = tau / g; pass ``antenna`` for links that terminate at a BS.

    For a BS link, ``geometry.h_y`` must be the BS height.  A zero gain
    (pattern null) yields zeta = inf.
    """
    tau = path_loss(geometry.d_3d, cls)
    if antenna is None:
        return tau
    theta = zenith_angle_at_bs(geometry.r_2d, geometry.h_x, geometry.h_y)
    g = bs_antenna_gain(theta, antenna)
    with np.errstate(divide="ignore"):
        return tau / g


def transmit_power(zeta_serving, pc: PowerControlParams, role: str):
    """Fractional power control min(P_max, rho * zeta^eps), in watts."""
    p_max, rho, eps = pc.for_role(role)
    z = np.asarray(zeta_serving, dtype=float)
    if np.any(z <= 0):
        raise ValueError("serving large-scale fading must be positive")
    with np.errstate(over="ignore"):
        p = np.minimum(p_max, rho * z ** eps)
    return p if p.ndim else float(p)


def serving_zeta(link_type: str, condition: str, r_2d, params: ScenarioParams):
    """Large-scale fading of a node's own serving link (uu for UAVs, gb for GUEs)."""
    cls = params.link(link_type, condition)
    h_x, h_y = params.heights(link_type)
    r = np.asarray(r_2d, dtype=float)
    if link_type == "gb":
        geom = LinkGeometry(r, h_x, h_y)
        with np.errstate(divide="ignore"):
            return large_scale_fading(geom, cls, params.antenna)
    d = np.hypot(r, h_x - h_y)
    with np.errstate(divide="ignore"):
        return cls.tau_hat * d ** cls.alpha


def serving_power(link_type: str, condition: str, r_2d, params: ScenarioParams):
    """Transmit power of a node whose serving link has length ``r_2d``.

    A zero-length co-height serving link gets zero power (zeta = 0).
    """
    zeta = serving_zeta(link_type, condition, r_2d, params)
    p_max, rho, eps = params.power_control.for_role(link_type[0])
    with np.errstate(over="ignore"):
        return np.minimum(p_max, rho * zeta ** eps)
