"""Scenario parameters for UAV-to-UAV links underlaying a cellular uplink.

All quantities are stored in SI units (m, m^-2, W, Hz).  Configuration
documents use a flat ``section.key = value`` layout (a subset of TOML) with
human-friendly units in the key names, e.g. ``deployment.lambda_b_per_km2``.

Height-dependent path-loss exponents are frozen into numeric
:class:`LinkClass` entries when a document is loaded, so sweeping
``uav.height_m`` means re-loading the document with the new height.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

LINK_TYPES = ("gb", "ub", "uu", "gu")
CONDITIONS = ("L", "N")
# node role of the transmitter of each link type
TX_ROLE = {"gb": "g", "ub": "u", "uu": "u", "gu": "g"}

PER_KM2 = 1e-6


class ConfigError(ValueError):
    """Raised when a configuration document cannot be parsed or validated."""


def dbm_to_watt(p_dbm):
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watt_to_dbm(p_w):
    """dBm of a power in watts; zero maps to -inf."""
    p = np.asarray(p_w, dtype=float)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(p) + 30.0
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LinkClass:
    """Path-loss and fading parameters of one (link type, condition) pair.

    ``link_type`` is one of gb (GUE->BS), ub (UAV->BS), uu (UAV->UAV) and
    gu (GUE->UAV); ``condition`` is ``"L"`` or ``"N"``.
    """

    link_type: str
    condition: str
    alpha: float
    tau_hat_db: float
    m_fading: int = 1

    @property
    def tau_hat(self) -> float:
        return 10.0 ** (self.tau_hat_db / 10.0)

    @property
    def beta(self) -> float:
        return 2.0 / self.alpha


@dataclass(frozen=True)
class AntennaParams:
    n_elements: int = 8
    downtilt_rad: float = math.radians(102.0)
    element_peak_gain: float = 10.0 ** (8.0 / 10.0)
    # 0.5 wavelength spacing is implicit in the array factor; kept for provenance
    element_spacing_wavelengths: float = 0.5


@dataclass(frozen=True)
class PowerControlParams:
    p_max_dbm_g: float = 24.0
    p_max_dbm_u: float = 24.0
    rho_dbm_g: float = -58.0
    rho_dbm_u: float = -58.0
    epsilon_g: float = 0.6
    epsilon_u: float = 0.6

    def for_role(self, role: str) -> tuple[float, float, float]:
        """Return ``(p_max_w, rho_w, epsilon)`` for node role ``"g"`` or ``"u"``."""
        if role == "g":
            return dbm_to_watt(self.p_max_dbm_g), dbm_to_watt(self.rho_dbm_g), self.epsilon_g
        if role == "u":
            return dbm_to_watt(self.p_max_dbm_u), dbm_to_watt(self.rho_dbm_u), self.epsilon_u
        raise ValueError(f"unknown node role {role!r}")


@dataclass(frozen=True)
class SimulationParams:
    disc_radius: float = 10_000.0
    gue_mode: str = "A"
    # path loss is evaluated at max(d_3d, min_distance) in the simulator
    min_distance: float = 1.0


@dataclass(frozen=True)
class AnalyticParams:
    # radius of the interfering field; None means the simulation disc radius
    field_radius: float | None = None
    # LoS step table resolution radius; None means ten cell radii on the grid
    los_table_radius: float | None = None
    # max change of cos(zenith) across a cell before it is split (BS victims)
    gain_cos_step: float = 0.01
    # where a cell's constant BS gain is read: "mid" (cos midpoint) or "left" edge
    gain_point: str = "mid"
    exact_theorem2: bool = False


@dataclass(frozen=True)
class ScenarioParams:
    lambda_b: float = 5.0 * PER_KM2
    lambda_u: float = 1.0 * PER_KM2
    h_b: float = 25.0
    h_u: float = 100.0
    h_g: float = 1.5
    sigma_u: float = 100.0
    r_max: float = 1000.0
    carrier_freq_ghz: float = 2.0
    prb_bandwidth_hz: float = 180e3
    noise_figure_db: float = 7.0
    noise_density_dbm_hz: float = -174.0
    itu_a1: float = 0.3
    itu_a2: float = 500.0
    itu_a3: float = 20.0
    antenna: AntennaParams = field(default_factory=AntennaParams)
    power_control: PowerControlParams = field(default_factory=PowerControlParams)
    link_classes: tuple[LinkClass, ...] = ()
    sinr_threshold_db: tuple[float, ...] = (0.0,)
    simulation: SimulationParams = field(default_factory=SimulationParams)
    analytic: AnalyticParams = field(default_factory=AnalyticParams)

    def __post_init__(self):
        if not self.link_classes:
            # the derived table needs these before full validation can run
            _require(self.h_u > 0, "heights must be strictly positive (h_u)")
            _require(self.carrier_freq_ghz > 0, "carrier_freq_ghz must be positive")
            object.__setattr__(
                self, "link_classes", default_link_classes(self.carrier_freq_ghz, self.h_u)
            )
        validate(self)

    def link(self, link_type: str, condition: str) -> LinkClass:
        for cls in self.link_classes:
            if cls.link_type == link_type and cls.condition == condition:
                return cls
        raise KeyError(f"no link class {link_type}/{condition}")

    def heights(self, link_type: str) -> tuple[float, float]:
        """(transmitter height, receiver height) of a link type."""
        node = {"g": self.h_g, "u": self.h_u, "b": self.h_b}
        return node[link_type[0]], node[link_type[1]]

    @property
    def sigma_g(self) -> float:
        """Rayleigh scale of the GUE-to-serving-BS distance."""
        return 1.0 / math.sqrt(2.0 * math.pi * self.lambda_b)

    @property
    def noise_w(self) -> float:
        return dbm_to_watt(noise_power_dbm(self))

    @property
    def los_cell_width(self) -> float:
        return 1000.0 / math.sqrt(self.itu_a1 * self.itu_a2)

    @property
    def field_radius(self) -> float:
        r = self.analytic.field_radius
        return self.simulation.disc_radius if r is None else r

    @property
    def los_table_radius(self) -> float:
        if self.analytic.los_table_radius is not None:
            return self.analytic.los_table_radius
        w = self.los_cell_width
        return math.ceil(10.0 / math.sqrt(math.pi * self.lambda_b) / w) * w


def default_link_classes(fc_ghz: float, h_u: float) -> tuple[LinkClass, ...]:
    """Path-loss table for an urban macro deployment, evaluated at ``h_u``."""
    f = 20.0 * math.log10(fc_ghz)
    uav_nlos = -17.5 + 20.0 * math.log10(40.0 * math.pi * fc_ghz / 3.0)
    lh = math.log10(h_u)
    rows = [
        ("gb", "L", 2.2, 28.0 + f),
        ("gb", "N", 3.9, 13.54 + f),
        ("ub", "L", 2.2, 28.0 + f),
        ("ub", "N", 4.6 - 0.7 * lh, uav_nlos),
        ("gu", "L", 2.225 - 0.05 * lh, 30.9 + f),
        ("gu", "N", 4.32 - 0.76 * lh, 32.4 + f),
        ("uu", "L", 2.2, 28.0 + f),
        ("uu", "N", 4.6 - 0.7 * lh, uav_nlos),
    ]
    return tuple(LinkClass(t, c, a, tau) for t, c, a, tau in rows)


def _require(ok: bool, what: str):
    if not ok:
        raise ConfigError(what)


def validate(p: ScenarioParams) -> None:
    for name in ("lambda_b", "h_b", "h_u", "h_g", "prb_bandwidth_hz", "carrier_freq_ghz",
                 "sigma_u", "r_max"):
        _require(getattr(p, name) > 0, f"{name} must be strictly positive (got {getattr(p, name)})")
    _require(p.lambda_u >= 0, f"lambda_u must be non-negative (got {p.lambda_u})")
    _require(min(p.itu_a1, p.itu_a2, p.itu_a3) > 0, "ITU constants a1, a2, a3 must be positive")
    a = p.antenna
    _require(int(a.n_elements) == a.n_elements and a.n_elements >= 1, "antenna: n_elements >= 1")
    _require(0 < a.downtilt_rad < math.pi, "antenna: 0 < downtilt < pi")
    _require(a.element_peak_gain > 0, "antenna: element_peak_gain > 0")
    for role in ("g", "u"):
        eps = getattr(p.power_control, f"epsilon_{role}")
        _require(0.0 <= eps <= 1.0, f"power_control.epsilon_{role}: epsilon ∈ [0,1] violated (got {eps})")
    seen = {(c.link_type, c.condition) for c in p.link_classes}
    _require(
        len(p.link_classes) == 8 and seen == {(t, c) for t in LINK_TYPES for c in CONDITIONS},
        "link_classes: every (link type, condition) pair must be present exactly once",
    )
    for c in p.link_classes:
        # alpha > 2 keeps the planar interference field summable
        _require(c.alpha > 2.0, f"link {c.link_type}_{c.condition}: alpha > 2 required (got {c.alpha})")
        _require(math.isfinite(c.tau_hat_db), f"link {c.link_type}_{c.condition}: tau_hat_db finite")
        _require(
            isinstance(c.m_fading, int) and c.m_fading >= 1,
            f"link {c.link_type}_{c.condition}: m_fading must be a positive integer (got {c.m_fading})",
        )
    _require(len(p.sinr_threshold_db) >= 1, "coverage.sinr_threshold_db must be non-empty")
    s = p.simulation
    _require(s.disc_radius > 0, "simulation.disc_radius_m must be positive")
    _require(s.gue_mode in ("A", "B"), f"simulation.gue_mode must be 'A' or 'B' (got {s.gue_mode!r})")
    _require(s.min_distance >= 0, "simulation.min_distance_m must be non-negative")
    an = p.analytic
    _require(an.field_radius is None or an.field_radius > 0, "analytic.field_radius_m must be positive")
    _require(an.gain_cos_step > 0, "analytic.gain_cos_step must be positive")
    _require(an.gain_point in ("mid", "left"),
             f"analytic.gain_point must be 'mid' or 'left' (got {an.gain_point!r})")


# ---------------------------------------------------------------------------
# flat document <-> ScenarioParams

# document key -> (attribute path, to-SI factor or None)
_SCALAR_KEYS: dict[str, tuple[str, float | None]] = {
    "deployment.lambda_b_per_km2": ("lambda_b", PER_KM2),
    "deployment.lambda_u_per_km2": ("lambda_u", PER_KM2),
    "deployment.bs_height_m": ("h_b", None),
    "deployment.gue_height_m": ("h_g", None),
    "uav.height_m": ("h_u", None),
    "uav.sigma_u_m": ("sigma_u", None),
    "uav.r_max_m": ("r_max", None),
    "channel.carrier_freq_ghz": ("carrier_freq_ghz", None),
    "channel.itu_a1": ("itu_a1", None),
    "channel.itu_a2": ("itu_a2", None),
    "channel.itu_a3": ("itu_a3", None),
    "noise.density_dbm_hz": ("noise_density_dbm_hz", None),
    "noise.prb_bandwidth_hz": ("prb_bandwidth_hz", None),
    "noise.noise_figure_db": ("noise_figure_db", None),
    "antenna.n_elements": ("antenna.n_elements", None),
    "antenna.downtilt_deg": ("antenna.downtilt_rad", math.pi / 180.0),
    "antenna.element_spacing_wavelengths": ("antenna.element_spacing_wavelengths", None),
    "power_control.p_max_dbm_g": ("power_control.p_max_dbm_g", None),
    "power_control.p_max_dbm_u": ("power_control.p_max_dbm_u", None),
    "power_control.rho_dbm_g": ("power_control.rho_dbm_g", None),
    "power_control.rho_dbm_u": ("power_control.rho_dbm_u", None),
    "power_control.epsilon_g": ("power_control.epsilon_g", None),
    "power_control.epsilon_u": ("power_control.epsilon_u", None),
    "simulation.disc_radius_m": ("simulation.disc_radius", None),
    "simulation.gue_mode": ("simulation.gue_mode", None),
    "simulation.min_distance_m": ("simulation.min_distance", None),
    "analytic.field_radius_m": ("analytic.field_radius", None),
    "analytic.los_table_radius_m": ("analytic.los_table_radius", None),
    "analytic.gain_cos_step": ("analytic.gain_cos_step", None),
    "analytic.gain_point": ("analytic.gain_point", None),
    "analytic.exact_theorem2": ("analytic.exact_theorem2", None),
}
_SPECIAL_KEYS = {"antenna.element_peak_gain_dbi", "coverage.sinr_threshold_db", "channel.m_fading"}
_LINK_FIELDS = ("alpha", "tau_hat_db", "m_fading")


def known_keys() -> list[str]:
    keys = list(_SCALAR_KEYS) + sorted(_SPECIAL_KEYS)
    keys += [f"link.{t}_{c}.{f}" for t in LINK_TYPES for c in CONDITIONS for f in _LINK_FIELDS]
    return keys


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_document(text: str) -> dict[str, Any]:
    """Parse a flat ``section.key = value`` document into a dotted-key dict."""
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse configuration document: {exc}") from exc


def parse_override(item: str) -> tuple[str, Any]:
    """Parse a ``key=value`` command-line override."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        if "," in raw:
            value = [float(x) for x in raw.split(",")]
        else:
            value = raw  # bare string such as gue_mode=B
    return key, value


def load_scenario(source: str | Path | Mapping[str, Any] | None = None,
                  overrides: Mapping[str, Any] | Iterable[str] | None = None) -> ScenarioParams:
    """Build validated :class:`ScenarioParams` from a document.

    ``source`` may be a path, document text, an already-parsed (nested or
    flat) mapping, or ``None`` for all defaults.  ``overrides`` are applied
    on top using the same dotted keys, either as a mapping or as
    ``"key=value"`` strings.
    """
    if source is None:
        flat: dict[str, Any] = {}
    elif isinstance(source, Mapping):
        flat = _flatten(source)
    elif isinstance(source, Path) or (isinstance(source, str) and "=" not in source
                                      and source.strip() and Path(source).is_file()):
        flat = parse_document(Path(source).read_text())
    else:
        flat = parse_document(str(source))
    if overrides:
        if not isinstance(overrides, Mapping):
            overrides = dict(parse_override(o) for o in overrides)
        flat.update(_flatten(overrides))
    return _build(flat)


def _build(flat: Mapping[str, Any]) -> ScenarioParams:
    unknown = [k for k in flat if k not in _SCALAR_KEYS and k not in _SPECIAL_KEYS
               and not _is_link_key(k)]
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")

    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {"antenna": {}, "power_control": {},
                                         "simulation": {}, "analytic": {}}
    for key, value in flat.items():
        if key not in _SCALAR_KEYS:
            continue
        attr, factor = _SCALAR_KEYS[key]
        if isinstance(value, str) and attr.endswith(("_radius",)) and value.lower() == "inf":
            value = math.inf
        if factor is not None:
            value = _number(key, value) * factor
        elif attr not in ("simulation.gue_mode", "analytic.gain_point", "analytic.exact_theorem2"):
            value = _number(key, value)
        if "." in attr:
            group, name = attr.split(".")
            nested[group][name] = value
        else:
            top[attr] = value
    if "antenna.element_peak_gain_dbi" in flat:
        nested["antenna"]["element_peak_gain"] = 10.0 ** (
            _number("antenna.element_peak_gain_dbi", flat["antenna.element_peak_gain_dbi"]) / 10.0)
    if "n_elements" in nested["antenna"]:
        n = nested["antenna"]["n_elements"]
        if n != int(n):
            raise ConfigError("antenna: n_elements >= 1 must be an integer")
        nested["antenna"]["n_elements"] = int(n)
    if "coverage.sinr_threshold_db" in flat:
        t = flat["coverage.sinr_threshold_db"]
        t = t if isinstance(t, (list, tuple)) else [t]
        top["sinr_threshold_db"] = tuple(_number("coverage.sinr_threshold_db", x) for x in t)
    if "gue_mode" in nested["simulation"]:
        nested["simulation"]["gue_mode"] = str(nested["simulation"]["gue_mode"]).upper()
    if "gain_point" in nested["analytic"]:
        nested["analytic"]["gain_point"] = str(nested["analytic"]["gain_point"]).lower()
    if "exact_theorem2" in nested["analytic"]:
        nested["analytic"]["exact_theorem2"] = bool(nested["analytic"]["exact_theorem2"])

    try:
        top["antenna"] = AntennaParams(**nested["antenna"])
        top["power_control"] = PowerControlParams(**nested["power_control"])
        top["simulation"] = SimulationParams(**nested["simulation"])
        top["analytic"] = AnalyticParams(**nested["analytic"])
    except TypeError as exc:  # pragma: no cover - keys are whitelisted above
        raise ConfigError(str(exc)) from exc

    base = ScenarioParams(**top)
    m_default = flat.get("channel.m_fading")
    classes = []
    for cls in base.link_classes:
        prefix = f"link.{cls.link_type}_{cls.condition}."
        changes = {}
        if m_default is not None:
            changes["m_fading"] = m_default
        for f in _LINK_FIELDS:
            if prefix + f in flat:
                changes[f] = flat[prefix + f]
        if "m_fading" in changes:
            m = changes["m_fading"]
            if isinstance(m, bool) or not float(m).is_integer():
                raise ConfigError(
                    f"link {cls.link_type}_{cls.condition}: m_fading must be a positive integer (got {m})")
            changes["m_fading"] = int(m)
        for f in ("alpha", "tau_hat_db"):
            if f in changes:
                changes[f] = _number(prefix + f, changes[f])
        classes.append(replace(cls, **changes))
    params = replace(base, link_classes=tuple(classes))
    if params.r_max < 3.0 * params.sigma_u:
        warnings.warn(
            f"r_max = {params.r_max} m is not much larger than sigma_u = {params.sigma_u} m; "
            "truncation shifts the U2U distance mean", stacklevel=2)
    return params


def _is_link_key(key: str) -> bool:
    parts = key.split(".")
    if len(parts) != 3 or parts[0] != "link" or parts[2] not in _LINK_FIELDS:
        return False
    t, _, c = parts[1].partition("_")
    return t in LINK_TYPES and c in CONDITIONS


def _number(key: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def to_flat(p: ScenarioParams) -> dict[str, Any]:
    """Fully resolved flat document (link table included) for ``p``."""
    out: dict[str, Any] = {}
    for key, (attr, factor) in _SCALAR_KEYS.items():
        obj = p
        for part in attr.split("."):
            obj = getattr(obj, part)
        if obj is None:
            continue
        out[key] = obj / factor if factor is not None else obj
    out["antenna.element_peak_gain_dbi"] = 10.0 * math.log10(p.antenna.element_peak_gain)
    out["coverage.sinr_threshold_db"] = list(p.sinr_threshold_db)
    for cls in p.link_classes:
        prefix = f"link.{cls.link_type}_{cls.condition}."
        out[prefix + "alpha"] = cls.alpha
        out[prefix + "tau_hat_db"] = cls.tau_hat_db
        out[prefix + "m_fading"] = cls.m_fading
    return out


def with_updates(p: ScenarioParams, updates: Mapping[str, Any]) -> ScenarioParams:
    """Copy of ``p`` with dotted-key ``updates`` applied.

    Link-table entries still at their derived defaults are re-derived, so
    changing ``uav.height_m`` or the carrier moves the height-dependent
    exponents along; explicitly overridden entries are kept.
    """
    flat = to_flat(p)
    for cls in default_link_classes(p.carrier_freq_ghz, p.h_u):
        prefix = f"link.{cls.link_type}_{cls.condition}."
        for f in ("alpha", "tau_hat_db"):
            if math.isclose(flat[prefix + f], getattr(cls, f), rel_tol=0.0, abs_tol=1e-12):
                del flat[prefix + f]
    flat.update(updates)
    return _build(flat)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps(p: ScenarioParams | Mapping[str, Any]) -> str:
    """Serialize to the flat document format (one ``key = value`` per line)."""
    flat = to_flat(p) if isinstance(p, ScenarioParams) else dict(p)
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in flat.items())


def noise_power_dbm(params: ScenarioParams) -> float:
    """Thermal noise power over one PRB, in dBm."""
    return (params.noise_density_dbm_hz + 10.0 * math.log10(params.prb_bandwidth_hz)
            + params.noise_figure_db)


def mean_u2u_distance(params: ScenarioParams) -> float:
    """Mean of the untruncated Rayleigh U2U distance, sigma_u * sqrt(pi/2)."""
    if params.r_max < 3.0 * params.sigma_u:
        warnings.warn("r_max is comparable to sigma_u; the truncated mean differs", stacklevel=2)
    return params.sigma_u * math.sqrt(math.pi / 2.0)


def as_dict(p: ScenarioParams) -> dict[str, Any]:
    return asdict(p)


__all__ = [
    "AnalyticParams", "AntennaParams", "ConfigError", "LinkClass", "PowerControlParams",
    "ScenarioParams", "SimulationParams", "dbm_to_watt", "watt_to_dbm", "default_link_classes",
    "dumps", "known_keys", "load_scenario", "mean_u2u_distance", "noise_power_dbm",
    "parse_override", "to_flat", "with_updates",
]
