"""Named experiments: the figure sweeps, engine selection and CSV/JSON output."""
from __future__ import annotations

import csv
import json
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analytic import CoverageResult, coverage_gue, coverage_u2u
from .config import ScenarioParams, load_scenario, to_flat, with_updates
from .montecarlo import CoverageCurve, estimate_ccdf, power_decomposition, simulate

EXPERIMENTS = ("ccdf_by_height", "power_decomposition", "epsilon_tradeoff", "custom_sweep")
ENGINES = ("analytic", "mc", "both")
# long engine names accepted on input
ENGINE_ALIASES = {"montecarlo": "mc"}
DEFAULT_THRESHOLDS = tuple(float(t) for t in np.linspace(-10.0, 30.0, 21))
ACCEPTANCE_BAND = 0.02


class CheckFailure(RuntimeError):
    """An analytic-vs-MC comparison fell outside the acceptance band."""


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    engine: str = "both"
    sweep_var: str | None = None
    grid: tuple = ()
    out_dir: str = "results"
    seed: int = 0
    drops: int = 10_000
    jobs: int = 1
    thresholds_db: tuple = DEFAULT_THRESHOLDS
    check: bool = False

    def __post_init__(self):
        object.__setattr__(self, "engine", ENGINE_ALIASES.get(self.engine, self.engine))
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.engine != "analytic" and self.drops < 100:
            raise ValueError("drops must be >= 100 for Monte Carlo engines")
        if self.name == "power_decomposition" and self.engine != "mc":
            raise ValueError("power_decomposition is a Monte Carlo experiment (use --engine mc)")
        if self.name == "custom_sweep" and not self.sweep_var:
            raise ValueError("custom_sweep needs a sweep variable")
        if len(self.resolved_grid()) == 0 or len(self.thresholds_db) == 0:
            raise ValueError("sweep grid and threshold grid must be non-empty")

    def resolved_grid(self) -> tuple:
        if self.grid:
            return tuple(self.grid)
        return {
            "ccdf_by_height": (50.0, 150.0),
            "power_decomposition": tuple(round(0.1 * i, 1) for i in range(11)),
            "epsilon_tradeoff": tuple(round(0.1 * i, 1) for i in range(11)),
        }.get(self.name, ())

    @property
    def engines(self) -> tuple[str, ...]:
        return ("analytic", "mc") if self.engine == "both" else (self.engine,)


@dataclass
class CompareSummary:
    max_abs_dev: float
    mean_abs_dev: float
    frac_inside_ci: float
    passed: bool
    tolerance: float = ACCEPTANCE_BAND


def compare_report(analytic, mc, tolerance: float = ACCEPTANCE_BAND) -> CompareSummary:
    """Deviation statistics of an analytic curve against an MC curve on the same grid.

    ``mc`` may carry ``ci_low``/``ci_high``; without them the CI fraction is nan.
    """
    ta, tm = np.asarray(analytic.thresholds_db, float), np.asarray(mc.thresholds_db, float)
    if ta.shape != tm.shape or not np.allclose(ta, tm):
        raise ValueError("analytic and MC curves use different threshold grids")
    a, m = np.asarray(analytic.coverage, float), np.asarray(mc.coverage, float)
    dev = np.abs(a - m)
    lo, hi = getattr(mc, "ci_low", None), getattr(mc, "ci_high", None)
    inside = float(np.mean((a >= lo) & (a <= hi))) if lo is not None and hi is not None else float("nan")
    mx = float(dev.max())
    return CompareSummary(mx, float(dev.mean()), inside, bool(mx <= tolerance + 1e-12), tolerance)


@dataclass
class ExperimentSummary:
    spec: ExperimentSpec
    out_dir: Path
    files: list = field(default_factory=list)
    comparisons: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons.values())


# ---------------------------------------------------------------------------
# writers

def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_curve(path: Path, curve) -> Path:
    curve.to_csv(path)
    return path


def _write_comparison(path: Path, analytic: CoverageResult, mc: CoverageCurve) -> Path:
    rows = []
    for t, a, m, lo, hi in zip(analytic.thresholds_db, analytic.coverage, mc.coverage, mc.ci_low, mc.ci_high):
        rows.append([f"{t:.6g}", f"{a:.10g}", f"{m:.10g}", f"{lo:.10g}", f"{hi:.10g}",
                     f"{abs(a - m):.10g}", int(lo <= a <= hi)])
    return _write_rows(path, ["threshold_db", "analytic", "mc", "mc_ci_low", "mc_ci_high", "abs_diff", "inside_ci"], rows)


def _fmt(v: float) -> str:
    return f"{v:g}".replace("-", "m").replace(".", "p")


# ---------------------------------------------------------------------------
# experiments

def _curves_for(params: ScenarioParams, engine: str, spec: ExperimentSpec, with_baseline: bool):
    """Coverage curves keyed by 'u2u', 'gue' and optionally 'gue_baseline' (no U2U)."""
    T = spec.thresholds_db
    if engine == "analytic":
        out = {"u2u": coverage_u2u(params, T), "gue": coverage_gue(params, T)}
        if with_baseline:
            out["gue_baseline"] = coverage_gue(params, T, lambda_u=0.0)
        return out
    res = simulate(params, spec.drops, spec.seed, jobs=spec.jobs)
    out = {"u2u": estimate_ccdf(res["u"], T), "gue": estimate_ccdf(res["b"], T)}
    if with_baseline:
        # dropping the UAV term of the same drops is a realization of lambda_u = 0
        out["gue_baseline"] = estimate_ccdf(res["b"], T, include_uav=False)
    return out


def _coverage_sweep(spec: ExperimentSpec, params: ScenarioParams, summary: ExperimentSummary,
                    points: list[tuple[str, ScenarioParams]], with_baseline: bool) -> None:
    out = summary.out_dir

    def work(item):
        label, p = item
        return label, {e: _curves_for(p, e, spec, with_baseline) for e in spec.engines}

    jobs = max(1, spec.jobs)
    if jobs > 1 and len(points) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, points))
    else:
        results = [work(pt) for pt in points]
    for label, by_engine in results:
        for engine, curves in by_engine.items():
            for name, curve in curves.items():
                summary.files.append(_write_curve(out / f"{engine}_{name}_{label}.csv", curve))
        if len(by_engine) == 2:
            for name in by_engine["analytic"]:
                a, m = by_engine["analytic"][name], by_engine["mc"][name]
                summary.files.append(_write_comparison(out / f"compare_{name}_{label}.csv", a, m))
                summary.comparisons[f"{name}_{label}"] = compare_report(a, m)


def _with(params: ScenarioParams, key: str, value) -> ScenarioParams:
    return with_updates(params, {key: value})


def _ccdf_by_height(spec, params, summary):
    pts = [(f"hu{_fmt(h)}", _with(params, "uav.height_m", float(h))) for h in spec.resolved_grid()]
    _coverage_sweep(spec, params, summary, pts, with_baseline=True)


def _epsilon_tradeoff(spec, params, summary):
    T = -5.0
    sigmas = (50.0, 100.0, 150.0)
    grid = spec.resolved_grid()
    spec_t = replace(spec, thresholds_db=(T,))
    rows = {}

    def work(item):
        sigma, eps = item
        p = _with(_with(params, "uav.sigma_u_m", sigma), "power_control.epsilon_u", float(eps))
        return item, {e: _curves_for(p, e, spec_t, False) for e in spec.engines}

    items = [(s, e) for s in sigmas for e in grid]
    if spec.jobs > 1:
        with ThreadPoolExecutor(spec.jobs) as ex:
            results = list(ex.map(work, items))
    else:
        results = [work(it) for it in items]
    for (sigma, eps), by_engine in results:
        for engine, curves in by_engine.items():
            for link, c in curves.items():
                lo = getattr(c, "ci_low", [np.nan])[0] if engine == "mc" else np.nan
                hi = getattr(c, "ci_high", [np.nan])[0] if engine == "mc" else np.nan
                rows.setdefault((engine, link, sigma), []).append(
                    [f"{eps:g}", f"{c.coverage[0]:.10g}", f"{lo:.10g}", f"{hi:.10g}"])
    for (engine, link, sigma), r in rows.items():
        path = summary.out_dir / f"{engine}_{link}_sigmau{_fmt(sigma)}.csv"
        summary.files.append(_write_rows(path, ["epsilon_u", "coverage_at_m5db", "ci_low", "ci_high"], r))


def _power_decomposition(spec, params, summary):
    rows = []
    for eps in spec.resolved_grid():
        p = _with(params, "power_control.epsilon_u", float(eps))
        pd = power_decomposition(simulate(p, spec.drops, spec.seed, jobs=spec.jobs))
        for victim in ("u", "b"):
            rows.append([f"{eps:g}", victim] + [f"{v:.6f}" for v in pd.row(victim)])
    summary.files.append(_write_rows(summary.out_dir / "mc_power_decomposition.csv",
                                     ["epsilon_u", "victim", "useful_dbm", "i_gue_dbm", "i_uav_dbm"], rows))


def _custom_sweep(spec, params, summary):
    key = spec.sweep_var
    pts = [(f"{key.replace('.', '_')}_{_fmt(float(v))}", _with(params, key, v)) for v in spec.resolved_grid()]
    _coverage_sweep(spec, params, summary, pts, with_baseline=False)


_RUNNERS = {
    "ccdf_by_height": _ccdf_by_height,
    "epsilon_tradeoff": _epsilon_tradeoff,
    "power_decomposition": _power_decomposition,
    "custom_sweep": _custom_sweep,
}


def _versions() -> dict:
    return {"u2ucov": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(summary: ExperimentSummary, params: ScenarioParams) -> Path:
    spec = asdict(summary.spec)
    doc = {
        "experiment": spec,
        "params": to_flat(params),
        "seed": summary.spec.seed,
        "versions": _versions(),
        "wall_clock_s": summary.wall_clock_s,
        "files": [p.name for p in summary.files],
        "comparisons": {k: asdict(v) for k, v in summary.comparisons.items()},
    }
    path = summary.out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))
    return path


def run_experiment(spec: ExperimentSpec, params: ScenarioParams) -> ExperimentSummary:
    """Run ``spec`` and write its CSVs plus ``manifest.json`` under ``spec.out_dir``.

    With ``spec.check`` a :class:`CheckFailure` is raised after writing if
    any analytic-vs-MC comparison misses the acceptance band.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = ExperimentSummary(spec, out)
    t0 = time.perf_counter()
    _RUNNERS[spec.name](spec, params, summary)
    summary.wall_clock_s = time.perf_counter() - t0
    write_manifest(summary, params)
    if spec.check and not summary.passed:
        bad = ", ".join(k for k, c in summary.comparisons.items() if not c.passed)
        raise CheckFailure(f"comparison outside +/-{ACCEPTANCE_BAND}: {bad}")
    return summary


def load_manifest(path: str | Path) -> tuple[ExperimentSpec, ScenarioParams]:
    """Spec and parameters recorded in a manifest, for a bit-identical rerun."""
    doc = json.loads(Path(path).read_text())
    e = dict(doc["experiment"])
    for k in ("grid", "thresholds_db"):
        e[k] = tuple(e[k])
    return ExperimentSpec(**e), load_scenario(doc["params"])


__all__ = [
    "ACCEPTANCE_BAND", "CheckFailure", "CompareSummary", "DEFAULT_THRESHOLDS", "ENGINE_ALIASES", "ENGINES",
    "EXPERIMENTS", "ExperimentSpec", "ExperimentSummary", "compare_report", "load_manifest", "run_experiment",
    "write_manifest",
]
