"""Monte Carlo ground truth: network drops and per-PRB SINR at a typical
U2U receiver and at a typical BS.

Each drop places a typical UAV receiver and a typical BS at the origin.
Interferers are PPPs on a disc of ``simulation.disc_radius``.  Every drop
draws from its own Philox stream keyed by (seed, drop index), so results
do not depend on how drops are scheduled or batched.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm

from .channel import LosStepFunction, bs_gain_at, los_step_table, sample_fading
from .config import ScenarioParams, watt_to_dbm

VICTIMS = ("u", "b")
MIN_RECORDS = 100
# candidate GUEs per BS when sampling Voronoi-uniform positions (mode B)
_CANDIDATES_PER_BS = 12


def drop_rng(seed: int, drop_idx: int) -> np.random.Generator:
    """Counter-based substream for one drop."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(drop_idx,))))


# ---------------------------------------------------------------------------
# realization

@dataclass
class Population:
    """Transmitters of one kind, with what is needed to compute their power.

    ``r`` is the horizontal distance to the origin, ``serving_dist`` the
    length of each node's own serving link and ``serving_los`` its state.
    ``xy`` (positions) is kept only when association needs it (mode B).
    """

    r: np.ndarray
    serving_dist: np.ndarray
    serving_los: np.ndarray
    power: np.ndarray
    xy: np.ndarray | None = None

    def __len__(self):
        return len(self.power)


@dataclass
class VictimField:
    """Interference paths from one population to one victim."""

    r: np.ndarray
    los: np.ndarray
    fading: np.ndarray
    power: np.ndarray


@dataclass
class NetworkRealization:
    drop_idx: int
    uavs: Population
    gues: Population
    # typical U2U pair (receiver at origin) and typical BS link (BS at origin)
    u2u_dist: float
    u2u_los: bool
    u2u_power: float
    u2u_fading: float
    gue_dist: float
    gue_los: bool
    gue_power: float
    gue_fading: float
    # interference fields keyed by (source, victim)
    fields: dict
    bs_xy: np.ndarray | None = None


class _Tables:
    """LoS step tables shared by all drops of a scenario (uniform-grid lookup)."""

    def __init__(self, params: ScenarioParams):
        self.params = params
        self.los: dict[str, LosStepFunction] = {lt: los_step_table(lt, params) for lt in ("gb", "ub", "uu", "gu")}
        self._inv_w = 1.0 / params.los_cell_width

    def p_los(self, link: str, r) -> np.ndarray:
        p = self.los[link].p_los
        idx = (np.asarray(r) * self._inv_w + 1e-9).astype(np.int64)
        return p[np.minimum(idx, len(p) - 1)]


def _tables(params: ScenarioParams) -> _Tables:
    return _Tables(params)


def _disc_radii(rng: np.random.Generator, density: float, radius: float) -> np.ndarray:
    """Distances to the centre of a PPP on a disc (the angles are never needed)."""
    n = rng.poisson(density * math.pi * radius * radius)
    return radius * np.sqrt(rng.random(n))


def _disc_points(rng: np.random.Generator, density: float, radius: float) -> np.ndarray:
    r = _disc_radii(rng, density, radius)
    phi = rng.random(len(r)) * 2.0 * math.pi
    return np.column_stack((r * np.cos(phi), r * np.sin(phi)))


def truncated_rayleigh(rng: np.random.Generator, sigma: float, r_max: float, size=None):
    """Inverse-CDF draw from a Rayleigh(sigma) law truncated at ``r_max``."""
    mass = -math.expm1(-r_max * r_max / (2.0 * sigma * sigma)) if math.isfinite(r_max) else 1.0
    u = rng.random(size)
    return sigma * np.sqrt(-2.0 * np.log1p(-u * mass))


def _power(link: str, dist, los, params: ScenarioParams):
    """Fractional power control from the serving link length and state."""
    h_x, h_y = params.heights(link)
    d = np.hypot(dist, h_x - h_y)
    cls_l, cls_n = params.link(link, "L"), params.link(link, "N")
    with np.errstate(divide="ignore"):
        tau = np.where(los, cls_l.tau_hat * d ** cls_l.alpha, cls_n.tau_hat * d ** cls_n.alpha)
        zeta = tau / bs_gain_at(dist, h_x, params) if link == "gb" else tau
    p_max, rho, eps = params.power_control.for_role(link[0])
    with np.errstate(over="ignore"):
        return np.minimum(p_max, rho * zeta ** eps)


def _fading(rng, params: ScenarioParams, link: str, los: np.ndarray) -> np.ndarray:
    m_l, m_n = params.link(link, "L").m_fading, params.link(link, "N").m_fading
    if m_l == m_n:
        return sample_fading(m_l, rng, len(los))
    return np.where(los, sample_fading(m_l, rng, len(los)), sample_fading(m_n, rng, len(los)))


def _field(rng, tab: _Tables, link: str, r: np.ndarray, power: np.ndarray) -> VictimField:
    los = rng.random(len(r)) < tab.p_los(link, r)
    return VictimField(r, los, _fading(rng, tab.params, link, los), power)


def _voronoi_gues(rng, bs_xy: np.ndarray, radius: float):
    """One active GUE per BS, uniform within its Voronoi cell (candidate thinning).

    Returns two assignments as (gue_xy, serving_dist, owner) triples: one for
    all BSs, and one for the tessellation without the BS at index 0, which is
    what a receiver at that BS's location sees when it is not itself a BS.
    Dropping a site only reassigns the candidates of its own cell, so the
    second assignment reuses the first except around the origin.
    """
    cand = _disc_points(rng, _CANDIDATES_PER_BS / (math.pi * radius * radius) * len(bs_xy), radius)
    tree = cKDTree(bs_xy)
    dist, owner = tree.query(cand)
    # random order, then the first candidate per BS is a uniform pick from its cell
    order = rng.permutation(len(cand))

    def pick(own, dst):
        _, first = np.unique(own[order], return_index=True)
        sel = order[first]
        return cand[sel], dst[sel], own[sel]

    own0, dist0 = owner.copy(), dist.copy()
    in0 = owner == 0
    if in0.any():
        d2, i2 = tree.query(cand[in0], k=2)
        own0[in0], dist0[in0] = i2[:, 1], d2[:, 1]
    return pick(owner, dist), pick(own0, dist0)


def drop_realization(params: ScenarioParams, rng: np.random.Generator, drop_idx: int = 0,
                     tables: _Tables | None = None) -> NetworkRealization:
    """Sample one network snapshot with its LoS states, fading and powers."""
    tab = tables or _tables(params)
    sim = params.simulation
    R = sim.disc_radius

    # U2U transmitters of other pairs
    uav_r = _disc_radii(rng, params.lambda_u, R)
    n_u = len(uav_r)
    u_dist = truncated_rayleigh(rng, params.sigma_u, params.r_max, n_u)
    u_los = rng.random(n_u) < tab.p_los("uu", u_dist)
    uavs = Population(uav_r, u_dist, u_los, _power("uu", u_dist, u_los, params))

    # typical pair: receiver at origin
    r_u = float(truncated_rayleigh(rng, params.sigma_u, params.r_max))
    los_u = bool(rng.random() < tab.p_los("uu", r_u))
    p_u = float(_power("uu", r_u, los_u, params))
    psi_u = float(sample_fading(params.link("uu", "L" if los_u else "N").m_fading, rng))

    # active GUEs
    bs_xy = g_xy = None
    uav_view = None  # mode B: GUEs as seen from a UAV receiver, which is not a BS site
    if sim.gue_mode == "A":
        g_r = _disc_radii(rng, params.lambda_b, R)
        g_dist = params.sigma_g * np.sqrt(-2.0 * np.log1p(-rng.random(len(g_r))))
        # non-homogeneous density at the typical BS: keep GUEs farther than their own BS
        at_bs = g_r > g_dist
        r_g = float(params.sigma_g * math.sqrt(-2.0 * math.log1p(-rng.random())))
    else:
        bs_xy = np.vstack(([0.0, 0.0], _disc_points(rng, params.lambda_b, R)))
        (g_xy, g_dist, owner), (v_xy, v_dist, _) = _voronoi_gues(rng, bs_xy, R)
        g_r = np.hypot(g_xy[:, 0], g_xy[:, 1])
        typical = owner == 0
        r_g = float(g_dist[typical][0]) if typical.any() else float(
            params.sigma_g * math.sqrt(-2.0 * math.log1p(-rng.random())))
        at_bs = ~typical
        v_los = rng.random(len(v_dist)) < tab.p_los("gb", v_dist)
        uav_view = Population(np.hypot(v_xy[:, 0], v_xy[:, 1]), v_dist, v_los,
                              _power("gb", v_dist, v_los, params), v_xy)
    g_los = rng.random(len(g_r)) < tab.p_los("gb", g_dist)
    gues = Population(g_r, g_dist, g_los, _power("gb", g_dist, g_los, params), g_xy)

    los_g = bool(rng.random() < tab.p_los("gb", r_g))
    p_g = float(_power("gb", r_g, los_g, params))
    psi_g = float(sample_fading(params.link("gb", "L" if los_g else "N").m_fading, rng))

    r_uav, r_gue = uavs.r, gues.r
    g_for_u = uav_view if uav_view is not None else gues
    fields = {
        ("u", "u"): _field(rng, tab, "uu", np.maximum(r_uav, sim.min_distance), uavs.power),
        ("g", "u"): _field(rng, tab, "gu", g_for_u.r, g_for_u.power),
        ("u", "b"): _field(rng, tab, "ub", r_uav, uavs.power),
        ("g", "b"): _field(rng, tab, "gb", r_gue[at_bs], gues.power[at_bs]),
    }
    return NetworkRealization(drop_idx, uavs, gues, r_u, los_u, p_u, psi_u,
                              r_g, los_g, p_g, psi_g, fields, bs_xy)


# ---------------------------------------------------------------------------
# SINR

@dataclass(frozen=True)
class SinrRecord:
    """Received powers (W) at one victim in one drop."""

    victim: str
    useful: float
    i_gue: float
    i_uav: float
    noise: float
    serving_los: bool
    drop_idx: int = -1

    @property
    def sinr(self) -> float:
        return self.useful / (self.i_gue + self.i_uav + self.noise)


def _received(field: VictimField, link: str, params: ScenarioParams) -> float:
    if len(field.r) == 0:
        return 0.0
    h_x, h_y = params.heights(link)
    d = np.hypot(field.r, h_x - h_y)
    cls_l, cls_n = params.link(link, "L"), params.link(link, "N")
    tau = np.where(field.los, cls_l.tau_hat * d ** cls_l.alpha, cls_n.tau_hat * d ** cls_n.alpha)
    rx = field.power * field.fading / tau
    if link[1] == "b":
        rx = rx * bs_gain_at(field.r, h_x, params)
    return float(np.sum(rx))


def sinr_u2u(real: NetworkRealization, params: ScenarioParams) -> SinrRecord:
    """SINR record at the typical UAV receiver (omnidirectional antennas)."""
    cls = params.link("uu", "L" if real.u2u_los else "N")
    d = max(real.u2u_dist, params.simulation.min_distance)
    useful = real.u2u_power * real.u2u_fading / (cls.tau_hat * d ** cls.alpha)
    return SinrRecord("u", useful,
                      _received(real.fields[("g", "u")], "gu", params),
                      _received(real.fields[("u", "u")], "uu", params),
                      params.noise_w, real.u2u_los, real.drop_idx)


def sinr_gue_ul(real: NetworkRealization, params: ScenarioParams) -> SinrRecord:
    """SINR record at the typical BS, every path weighted by the BS array gain."""
    cls = params.link("gb", "L" if real.gue_los else "N")
    d = math.hypot(real.gue_dist, params.h_g - params.h_b)
    gain = float(bs_gain_at(real.gue_dist, params.h_g, params))
    useful = real.gue_power * real.gue_fading * gain / (cls.tau_hat * d ** cls.alpha)
    return SinrRecord("b", useful,
                      _received(real.fields[("g", "b")], "gb", params),
                      _received(real.fields[("u", "b")], "ub", params),
                      params.noise_w, real.gue_los, real.drop_idx)


# ---------------------------------------------------------------------------
# batches of drops

@dataclass
class RecordSet:
    """Column-wise records of one victim type, ordered by drop index."""

    victim: str
    drop_idx: np.ndarray
    useful: np.ndarray
    i_gue: np.ndarray
    i_uav: np.ndarray
    noise: np.ndarray
    serving_los: np.ndarray

    def __len__(self):
        return len(self.useful)

    def sinr(self, include_uav: bool = True) -> np.ndarray:
        interference = self.i_gue + (self.i_uav if include_uav else 0.0)
        return self.useful / (interference + self.noise)

    def sinr_db(self, include_uav: bool = True) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.sinr(include_uav))

    def record(self, i: int) -> SinrRecord:
        return SinrRecord(self.victim, float(self.useful[i]), float(self.i_gue[i]), float(self.i_uav[i]),
                          float(self.noise[i]), bool(self.serving_los[i]), int(self.drop_idx[i]))

    @classmethod
    def from_records(cls, records) -> "RecordSet":
        records = list(records)
        if not records:
            raise ValueError("no records")
        victims = {r.victim for r in records}
        if len(victims) != 1:
            raise ValueError("records mix victim types")
        col = lambda name, dt=float: np.array([getattr(r, name) for r in records], dtype=dt)  # noqa: E731
        return cls(victims.pop(), col("drop_idx", int), col("useful"), col("i_gue"), col("i_uav"),
                   col("noise"), col("serving_los", bool))

    @classmethod
    def concat(cls, parts) -> "RecordSet":
        parts = list(parts)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        out = cls(parts[0].victim, cat("drop_idx"), cat("useful"), cat("i_gue"), cat("i_uav"),
                  cat("noise"), cat("serving_los"))
        order = np.argsort(out.drop_idx, kind="stable")
        return cls(out.victim, *(getattr(out, n)[order] for n in
                                 ("drop_idx", "useful", "i_gue", "i_uav", "noise", "serving_los")))


@dataclass
class SimulationResult:
    params: ScenarioParams
    seed: int
    n_drops: int
    records: dict  # victim -> RecordSet

    def __getitem__(self, victim: str) -> RecordSet:
        return self.records[victim]

    def to_csv(self, path: str | Path) -> None:
        write_records(path, self.records.values())


def _run_range(params: ScenarioParams, seed: int, start: int, stop: int) -> dict:
    tab = _tables(params)
    n = stop - start
    cols = {v: {k: np.empty(n) for k in ("useful", "i_gue", "i_uav")} for v in VICTIMS}
    los = {v: np.empty(n, bool) for v in VICTIMS}
    for k, idx in enumerate(range(start, stop)):
        real = drop_realization(params, drop_rng(seed, idx), idx, tab)
        for v, rec in (("u", sinr_u2u(real, params)), ("b", sinr_gue_ul(real, params))):
            cols[v]["useful"][k] = rec.useful
            cols[v]["i_gue"][k] = rec.i_gue
            cols[v]["i_uav"][k] = rec.i_uav
            los[v][k] = rec.serving_los
    idx = np.arange(start, stop)
    return {v: RecordSet(v, idx, cols[v]["useful"], cols[v]["i_gue"], cols[v]["i_uav"],
                         np.full(n, params.noise_w), los[v]) for v in VICTIMS}


def simulate(params: ScenarioParams, n_drops: int, seed: int = 0, jobs: int = 1,
             chunk: int = 2000, first_drop: int = 0) -> SimulationResult:
    """Run ``n_drops`` independent drops; records are merged in drop order.

    ``jobs`` > 1 evaluates chunks on a thread pool; the output is identical
    for any ``jobs`` and ``chunk`` because each drop owns its RNG stream.
    """
    if n_drops < 1:
        raise ValueError("n_drops must be positive")
    if params.simulation.disc_radius < params.field_radius:
        warnings.warn("simulation disc is smaller than the analytic field radius", stacklevel=2)
    bounds = [(a, min(a + chunk, first_drop + n_drops)) for a in range(first_drop, first_drop + n_drops, chunk)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            parts = list(ex.map(lambda b: _run_range(params, seed, *b), bounds))
    else:
        parts = [_run_range(params, seed, *b) for b in bounds]
    records = {v: RecordSet.concat(p[v] for p in parts) for v in VICTIMS}
    return SimulationResult(params, seed, n_drops, records)


def write_records(path: str | Path, record_sets) -> None:
    """Raw dump: drop_idx, victim, useful_dbm, i_gue_dbm, i_uav_dbm, noise_dbm, serving_los."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["drop_idx", "victim", "useful_dbm", "i_gue_dbm", "i_uav_dbm", "noise_dbm", "serving_los"])
        for rs in record_sets:
            cols = [watt_to_dbm(getattr(rs, n)) for n in ("useful", "i_gue", "i_uav", "noise")]
            for i in range(len(rs)):
                w.writerow([int(rs.drop_idx[i]), rs.victim] + [f"{c[i]:.6f}" for c in cols]
                           + [int(rs.serving_los[i])])


# ---------------------------------------------------------------------------
# estimators

@dataclass
class CoverageCurve:
    """Empirical P(SINR > T) with Wilson 95% half-widths."""

    thresholds_db: np.ndarray
    coverage: np.ndarray
    ci_half: np.ndarray
    n: int
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_db", "coverage", "ci_low", "ci_high", "n"])
            for t, c, lo, hi in zip(self.thresholds_db, self.coverage, self.ci_low, self.ci_high):
                w.writerow([f"{t:.6g}", f"{c:.10g}", f"{lo:.10g}", f"{hi:.10g}", self.n])


def wilson_interval(k, n: int, confidence: float = 0.95):
    """Wilson score interval (low, high) for k successes out of n."""
    z = norm.ppf(0.5 + confidence / 2.0)
    k = np.asarray(k, dtype=float)
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return centre - half, centre + half


def estimate_ccdf(records, T_grid, include_uav: bool = True) -> CoverageCurve:
    """Empirical CCDF of SINR over ``records`` (a RecordSet or SinrRecord sequence)."""
    rs = records if isinstance(records, RecordSet) else RecordSet.from_records(records)
    if len(rs) < MIN_RECORDS:
        raise ValueError(f"need at least {MIN_RECORDS} records, got {len(rs)}")
    T = np.atleast_1d(np.asarray(T_grid, dtype=float))
    sinr = rs.sinr_db(include_uav)
    k = np.array([(sinr > t).sum() for t in T])
    n = len(rs)
    lo, hi = wilson_interval(k, n)
    return CoverageCurve(T, k / n, 0.5 * (hi - lo), n, lo, hi)


@dataclass(frozen=True)
class PowerDecomposition:
    """Mean received powers in dBm per victim ("u" or "b")."""

    useful_dbm: dict
    i_gue_dbm: dict
    i_uav_dbm: dict

    def row(self, victim: str) -> tuple[float, float, float]:
        return self.useful_dbm[victim], self.i_gue_dbm[victim], self.i_uav_dbm[victim]


def power_decomposition(records, params: ScenarioParams | None = None) -> PowerDecomposition:
    """Arithmetic means (linear, then dBm) of useful power and both interference classes.

    ``records`` is a SimulationResult, a mapping victim -> RecordSet, or a
    single RecordSet.  An absent class (e.g. no UAVs) is reported as -inf.
    """
    if isinstance(records, SimulationResult):
        sets = records.records
    elif isinstance(records, RecordSet):
        sets = {records.victim: records}
    else:
        sets = dict(records)
    out = ({}, {}, {})
    for v, rs in sets.items():
        if len(rs) < MIN_RECORDS:
            raise ValueError(f"need at least {MIN_RECORDS} records, got {len(rs)}")
        for d, name in zip(out, ("useful", "i_gue", "i_uav")):
            d[v] = float(watt_to_dbm(np.mean(getattr(rs, name))))
    return PowerDecomposition(*out)


__all__ = [
    "CoverageCurve", "NetworkRealization", "Population", "PowerDecomposition", "RecordSet",
    "SimulationResult", "SinrRecord", "VictimField", "drop_realization", "drop_rng",
    "estimate_ccdf", "power_decomposition", "simulate", "sinr_gue_ul", "sinr_u2u",
    "truncated_rayleigh", "wilson_interval", "write_records",
]
