"""Acceptance suite evaluated against the stored outputs of a run directory.

Every criterion reads only the artifacts it needs, so a damaged value
affects exactly the criteria built on it. Decay fits distinguish a window
the run never covered ("window unsatisfied") from a rate that is too slow.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from config import ModelConfig, load_model_config
from curvature_estimates import (
    DiagnosticsSeries,
    MIN_FIT_SAMPLES,
    fit_decay,
    instant_smoothing_report,
)
from error_handling import LabError, MissingArtifact, NonpositiveValue, TooFewSamples
from metric_space import lemma_threshold
from persistence import RunManifest, read_json, read_series, rung_dir

logger = logging.getLogger(__name__)

FIT_WINDOW = (2.0, 12.0)
# Tolerances of the individual criteria.
CALIBRATION_TOL = 1e-8
CONVERGENCE_RATE = 0.70
CONVERGENCE_FINAL = 1e-3
PHI_DOT_RATE = 0.20
TRACE_DEFECT_RATE = 0.10
BOUNDS_DRIFT = 0.10
TWISTED_DRIFT = 0.10
GH_FRACTION = 0.05
GH_TIME = 10.0
JACOBIAN_TOL = 1e-6
UNIQUENESS_TOL = 1e-8
RICHARDSON_TOL = 0.2

PASS = "pass"
FAIL = "fail"
WINDOW_UNSATISFIED = "window unsatisfied"
MISSING = "missing artifact"
NOT_APPLICABLE = "n/a"


@dataclass
class CriterionResult:
    number: int
    title: str
    status: str
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status in (PASS, NOT_APPLICABLE)


class RunArtifacts:
    """Lazy access to the stored outputs of one run directory."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        config_path = self.run_dir / "config.json"
        if not config_path.exists():
            raise MissingArtifact(f"{config_path} not found")
        self.config: ModelConfig = load_model_config(config_path)
        self._series: Dict[tuple, DiagnosticsSeries] = {}
        self._oracles: Optional[dict] = None

    def ladder(self, stage: str = "flow") -> List[float]:
        """Rungs of a stage that have a diagnostics table, largest eps first."""
        base = self.run_dir / stage
        if not base.is_dir():
            return []
        found = []
        for child in base.iterdir():
            if child.name.startswith("eps_") and (child / "diagnostics.csv").exists():
                found.append(float(child.name[4:]))
        return sorted(found, reverse=True)

    def series(self, eps: float, stage: str = "flow") -> DiagnosticsSeries:
        key = (stage, eps)
        if key not in self._series:
            self._series[key] = read_series(rung_dir(self.run_dir, eps, stage) / "diagnostics.csv")
        return self._series[key]

    def finest(self, stage: str = "flow") -> DiagnosticsSeries:
        ladder = self.ladder(stage)
        if not ladder:
            raise MissingArtifact(f"no diagnostics under {self.run_dir / stage}")
        return self.series(ladder[-1], stage)

    def two_finest(self, stage: str = "flow") -> List[DiagnosticsSeries]:
        ladder = self.ladder(stage)
        if len(ladder) < 2:
            raise MissingArtifact(f"fewer than two rungs under {self.run_dir / stage}")
        return [self.series(eps, stage) for eps in ladder[-2:]]

    @property
    def oracles(self) -> dict:
        if self._oracles is None:
            self._oracles = read_json(self.run_dir / "oracles.json")
        return self._oracles

    def oracle(self, key: str):
        if key not in self.oracles:
            raise MissingArtifact(f"oracles.json has no entry {key!r}")
        return self.oracles[key]


def _covers(series: DiagnosticsSeries, t_hi: float):
    """Raise TooFewSamples unless the series reaches t_hi."""
    t = series.times
    if t.size == 0 or t[-1] < t_hi - 1e-9:
        end = t[-1] if t.size else float("nan")
        raise TooFewSamples(f"run ends at t={end:g} before t={t_hi:g}")


def _value_at(series: DiagnosticsSeries, column: str, t: float) -> float:
    _covers(series, t)
    times = series.times
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9:
        raise TooFewSamples(f"no sample at t={t:g}")
    return float(series.column(column)[k])


def _drift(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _window_max(series: DiagnosticsSeries, column: str, t_lo: float, t_hi: float, weight_t=False) -> float:
    mask = series.window(t_lo, t_hi)
    if not mask.any():
        raise TooFewSamples(f"no samples in [{t_lo:g}, {t_hi:g}]")
    values = series.column(column)[mask]
    if weight_t:
        values = values * series.times[mask]
    return float(np.max(values))


def _verdict(ok: bool) -> str:
    return PASS if ok else FAIL


def _twisted_only(config: ModelConfig) -> bool:
    return config.mode == "twisted"


def calibration(art: RunArtifacts):
    calib = art.oracle("calibration")
    area = float(np.max(art.finest().column("area_defect")))
    error = float(calib["fs_curvature_error"])
    ok = error <= CALIBRATION_TOL and area <= CALIBRATION_TOL
    return _verdict(ok), f"FS curvature error {error:.2e} (order {calib['order']}), max area defect {area:.2e}"


def cross_solver(art: RunArtifacts):
    if not _twisted_only(art.config):
        return NOT_APPLICABLE, "no limit solution in normalized mode"
    series = art.finest()
    _covers(series, FIT_WINDOW[1])
    fit = fit_decay(series.times, series.column("sup_v"), FIT_WINDOW)
    final = _value_at(series, "sup_v", FIT_WINDOW[1])
    ok = fit.rate >= CONVERGENCE_RATE and final < CONVERGENCE_FINAL
    return _verdict(ok), f"rate {fit.rate:.3f} (>= {CONVERGENCE_RATE}), sup at t=12 {final:.2e}"


def phi_dot_decay(art: RunArtifacts):
    series = art.finest()
    _covers(series, FIT_WINDOW[1])
    fit = fit_decay(series.times, series.column("sup_phi_dot"), FIT_WINDOW)
    return _verdict(fit.rate >= PHI_DOT_RATE), f"rate {fit.rate:.3f} (>= {PHI_DOT_RATE})"


def _defect_rate(series: DiagnosticsSeries, suffix: str) -> float:
    """Fit the positive part when it has enough positive samples, its majorant otherwise."""
    positive = series.column(f"trace_defect_pos{suffix}")
    mask = series.window(*FIT_WINDOW)
    column = positive if np.count_nonzero(positive[mask] > 0.0) >= MIN_FIT_SAMPLES else series.column(
        f"trace_defect_abs{suffix}"
    )
    return fit_decay(series.times, column, FIT_WINDOW).rate


def trace_defect_decay(art: RunArtifacts):
    if not _twisted_only(art.config):
        return NOT_APPLICABLE, "no limit solution in normalized mode"
    series = art.finest()
    _covers(series, FIT_WINDOW[1])
    rate = _defect_rate(series, "")
    if rate >= TRACE_DEFECT_RATE:
        return PASS, f"rate {rate:.3f} with gamma = {art.config.weight_gamma:g}"
    retry = _defect_rate(series, "_2")
    return _verdict(retry >= TRACE_DEFECT_RATE), (
        f"rate {rate:.3f} with gamma, {retry:.3f} with 2 gamma (>= {TRACE_DEFECT_RATE})"
    )


def _bound_quantities(series: DiagnosticsSeries) -> Dict[str, float]:
    return {
        "sup_phi": float(np.max(series.column("sup_phi"))),
        "sup_phi_dot": float(np.max(series.column("sup_phi_dot"))),
        "sup_trace_chi": float(np.max(series.column("sup_trace_chi"))),
        "ratio_range": float(np.max(series.column("ratio_max")) / np.min(series.column("ratio_min"))),
    }


def uniform_bounds(art: RunArtifacts):
    coarse, fine = (_bound_quantities(s) for s in art.two_finest())
    refined_ladder = art.ladder("refined")
    if not refined_ladder:
        raise MissingArtifact("no refined rungs; set refine = true")
    finest_eps = art.ladder()[-1]
    if finest_eps not in refined_ladder:
        raise MissingArtifact(f"rung eps={finest_eps:g} was not refined")
    refined = _bound_quantities(art.series(finest_eps, "refined"))

    drifts = {}
    for key in fine:
        drifts[key] = max(_drift(coarse[key], fine[key]), _drift(fine[key], refined[key]))
    worst = max(drifts, key=drifts.get)
    return _verdict(drifts[worst] < BOUNDS_DRIFT), f"largest drift {drifts[worst]:.3f} in {worst}"


def instant_smoothing(art: RunArtifacts):
    probe = art.config.probe
    if probe is None:
        raise MissingArtifact("no smoothing probe configured")
    ladder = art.ladder("probe")
    if len(ladder) < 2:
        raise MissingArtifact("fewer than two probe rungs")
    series = {eps: art.series(eps, "probe") for eps in ladder}
    for s in series.values():
        _covers(s, probe.t0)
    report = instant_smoothing_report(series, probe.t0, probe.t_min)
    growth = ", ".join(f"{g:.2f}" for g in report.early_growth)
    return _verdict(report.consistent), f"M drift {report.weighted_drift:.3f}, early growth [{growth}]"


def twisted_scalar_bound(art: RunArtifacts):
    coarse, fine = art.two_finest()
    for s in (coarse, fine):
        _covers(s, FIT_WINDOW[1])
    late = _drift(
        _window_max(coarse, "sup_abs_twisted", 1.0, 12.0), _window_max(fine, "sup_abs_twisted", 1.0, 12.0)
    )
    early = _drift(
        _window_max(coarse, "sup_abs_twisted", 1e-12, 1.0, weight_t=True),
        _window_max(fine, "sup_abs_twisted", 1e-12, 1.0, weight_t=True),
    )
    ok = late < TWISTED_DRIFT and early < TWISTED_DRIFT
    return _verdict(ok), f"drift on [1,12] {late:.3f}, drift of t sup|R~| on (0,1] {early:.3f}"


def diameter_bound(art: RunArtifacts):
    series = art.finest()
    _covers(series, FIT_WINDOW[1])
    mask = series.window(0.0, 12.0)
    ratio_max = float(np.max(series.column("ratio_max")[mask]))
    ratio_min = float(np.min(series.column("ratio_min")[mask]))
    constant = max(ratio_max, 1.0 / ratio_min)
    diam = series.column("total_diameter")[mask]
    reference = series.column("reference_diameter")[mask]
    tol = art.config.metric.metrication_tol
    upper = math.sqrt(constant) * reference.max() * (1.0 + tol)
    lower = reference.min() / math.sqrt(constant) * (1.0 - tol)
    ok = diam.max() <= upper and diam.min() >= lower
    spread = diam.max() / diam.min()
    return _verdict(ok), (
        f"diam in [{diam.min():.4f}, {diam.max():.4f}], allowed [{lower:.4f}, {upper:.4f}] (C = {constant:.3f}); "
        f"max/min {spread:.4f}, sqrt(C) {math.sqrt(constant):.4f}"
    )


def fiber_collapse(art: RunArtifacts):
    series = art.finest()
    _covers(series, FIT_WINDOW[1])
    fit = fit_decay(series.times, series.column("fiber_diameter"), FIT_WINDOW)
    if art.config.mode == "twisted":
        rate_ok = abs(fit.rate - 0.5) < 1e-9
    else:
        rate_ok = fit.rate > 0.0
    tol = art.config.metric.metrication_tol
    circumference = art.oracle("fiber_circumference")
    worst = max(abs(row["scaling_error"]) for row in circumference)
    return _verdict(rate_ok and worst <= tol), (
        f"fitted rate {fit.rate:.12f}, oracle scaling error {worst:.2e} (tol {tol:g})"
    )


def gh_convergence(art: RunArtifacts):
    if not _twisted_only(art.config):
        return NOT_APPLICABLE, "no limit space in normalized mode"
    series = art.finest()
    bound = _value_at(series, "gh_bound", GH_TIME)
    limit_diameter = float(art.oracle("limit_diameter"))
    gh_ok = bound < GH_FRACTION * limit_diameter

    ratios = []
    for k, eps_gh in enumerate(art.config.metric.gh_radii):
        mask = series.times >= lemma_threshold(eps_gh, art.config) - 1e-12
        values = series.column(f"nbhd_{k}")[mask]
        values = values[np.isfinite(values)]
        if values.size == 0:
            raise TooFewSamples(f"no resolved neighborhood samples past the threshold of eps_gh={eps_gh:g}")
        ratios.append(float(values.max()) / eps_gh)
    coarsest = ratios[int(np.argmax(art.config.metric.gh_radii))]
    nbhd_ok = max(ratios) <= art.config.metric.nbhd_constant * coarsest
    shown = ", ".join(f"{r:.3f}" for r in ratios)
    return _verdict(gh_ok and nbhd_ok), (
        f"GH bound {bound:.4f} vs {GH_FRACTION * limit_diameter:.4f}; diam/eps ratios [{shown}]"
    )


def oracles(art: RunArtifacts):
    jacobian = float(art.oracle("jacobian_fd_error"))
    metrication = art.oracle("metrication")
    gap = max(float(v) for v in metrication.values())
    order = float(art.oracle("richardson_order"))
    checks = {
        "jacobian": jacobian < JACOBIAN_TOL,
        "dijkstra": gap <= art.config.metric.metrication_tol,
        "richardson": abs(order - 1.0) <= RICHARDSON_TOL,
    }
    detail = f"jacobian {jacobian:.2e}, metrication gap {gap:.3e}, order {order:.3f}"
    if _twisted_only(art.config):
        spread = float(art.oracle("uniqueness_spread"))
        checks["uniqueness"] = spread < UNIQUENESS_TOL
        detail += f", uniqueness spread {spread:.2e}"
    failed = [name for name, ok in checks.items() if not ok]
    if failed:
        detail += f" (failed: {', '.join(failed)})"
    return _verdict(not failed), detail


CRITERIA: List[tuple] = [
    (1, "calibration", calibration),
    (2, "cross-solver convergence", cross_solver),
    (3, "phi_dot decay", phi_dot_decay),
    (4, "weighted trace defect", trace_defect_decay),
    (5, "uniform bounds", uniform_bounds),
    (6, "instant smoothing", instant_smoothing),
    (7, "twisted scalar bound", twisted_scalar_bound),
    (8, "diameter bound", diameter_bound),
    (9, "fiber collapse", fiber_collapse),
    (10, "GH convergence", gh_convergence),
    (11, "oracles", oracles),
]


def _run_criterion(number: int, title: str, check: Callable, art: RunArtifacts) -> CriterionResult:
    try:
        status, detail = check(art)
    except TooFewSamples as e:
        status, detail = WINDOW_UNSATISFIED, str(e)
    except MissingArtifact as e:
        status, detail = MISSING, str(e)
    except NonpositiveValue as e:
        status, detail = FAIL, str(e)
    except (LabError, KeyError, ValueError) as e:
        status, detail = FAIL, f"{type(e).__name__}: {e}"
    return CriterionResult(number, title, status, detail)


def evaluate(run_dir) -> List[CriterionResult]:
    """Evaluate every criterion against the artifacts of run_dir.

    Raises:
        MissingArtifact: If the run directory holds no configuration.
    """
    art = RunArtifacts(run_dir)
    try:
        issues = RunManifest.load(run_dir).problems(run_dir)
    except MissingArtifact:
        issues = ["manifest.json not found"]
    for issue in issues:
        logger.warning(f"Manifest: {issue}")

    results = [_run_criterion(number, title, check, art) for number, title, check in CRITERIA]
    for result in results:
        logger.info(f"Criterion {result.number} ({result.title}): {result.status}")
    return results


def all_passed(results: List[CriterionResult]) -> bool:
    return all(r.passed for r in results)


def format_table(results: List[CriterionResult]) -> str:
    """Plain-text pass/fail table."""
    width = max(len(r.title) for r in results)
    lines = [f"{'#':>2}  {'criterion':<{width}}  {'status':<18}  detail"]
    for r in results:
        lines.append(f"{r.number:>2}  {r.title:<{width}}  {r.status:<18}  {r.detail}")
    verdict = "ALL PASS" if all_passed(results) else "FAILED"
    lines.append(verdict)
    return "\n".join(lines)
