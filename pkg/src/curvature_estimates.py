"""Curvature, trace and convergence monitors of the flow, and decay-rate fits.

Reduced-chart conventions for a base density rho: tr_omega(sigma) = sigma / rho,
Laplacian u'' / rho, |du|^2 = u'^2 / rho and scalar curvature
-(log rho)'' / rho, so that the Fubini-Study density has R = 2.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from chart_geometry import (
    Density,
    ReferenceBundle,
    centered_first_difference,
    centered_second_difference,
    second_difference,
)
from config import ModelConfig
from error_handling import NonpositiveValue, TooFewSamples, UnresolvedRegion
from metric_space import (
    gh_upper_bound,
    neighborhood_diameter,
    fiber_diameter,
    pole_to_pole,
)
from state import FlowState

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 8

BASE_COLUMNS = [
    "t",
    "dt",
    "area_defect",
    "fiber_area",
    "sup_phi",
    "sup_phi_dot",
    "sup_v",
    "sup_u_minus_psi",
    "scalar_max",
    "scalar_min",
    "sup_abs_scalar",
    "sup_abs_twisted",
    "sup_trace_chi",
    "sup_trace_omega0",
    "ratio_min",
    "ratio_max",
    "t_grad_u_sup",
    "t_lap_u_inf",
    "trace_defect_pos",
    "trace_defect_abs",
    "trace_defect_pos_2",
    "trace_defect_abs_2",
    "local_c0_defect",
    "phi_dot_evolution_defect",
    "max_principle_slack",
    "base_diameter",
    "fiber_diameter",
    "total_diameter",
    "reference_diameter",
    "gh_bound",
]


def diagnostic_columns(config: ModelConfig) -> List[str]:
    """Fixed CSV header: base monitors then one neighborhood column per gh radius."""
    return BASE_COLUMNS + [f"nbhd_{k}" for k in range(len(config.metric.gh_radii))]


class DiagnosticsSeries:
    """Per-sample monitor records with a fixed column set.

    Times are strictly increasing and every row carries every column.
    """

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        self._rows: List[List[float]] = []

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, row: Mapping[str, float]):
        """Add a complete record.

        Raises:
            ValueError: If a column is missing or time does not increase.
        """
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise ValueError(f"diagnostics row missing columns: {missing}")
        if self._rows and not row["t"] > self._rows[-1][0]:
            raise ValueError(f"sample time {row['t']} does not increase")
        self._rows.append([float(row[c]) for c in self.columns])

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    def column(self, name: str) -> np.ndarray:
        """All values of one monitor."""
        k = self.columns.index(name)
        return np.array([r[k] for r in self._rows])

    def row(self, index: int) -> Dict[str, float]:
        return dict(zip(self.columns, self._rows[index]))

    def to_array(self) -> np.ndarray:
        return np.array(self._rows, dtype=float).reshape(len(self._rows), len(self.columns))

    @classmethod
    def from_array(cls, columns: Sequence[str], rows: np.ndarray) -> "DiagnosticsSeries":
        series = cls(columns)
        series._rows = [list(map(float, r)) for r in np.atleast_2d(rows)] if rows.size else []
        return series

    def window(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Row mask of samples with t_lo <= t <= t_hi."""
        t = self.times
        return (t >= t_lo - 1e-12) & (t <= t_hi + 1e-12)


def scalar_curvature(rho: Density, order: int = 2) -> np.ndarray:
    """R = -(log rho)'' / rho; NaN where the difference stencil does not fit."""
    second = centered_second_difference(np.log(rho.values), rho.grid.spacing, order)
    return -second / rho.values


def _base_curvature(state: FlowState, refs: ReferenceBundle, order: int) -> np.ndarray:
    second = centered_second_difference(np.log(state.omega), refs.grid.spacing, order)
    return -second / state.omega


def total_scalar(state: FlowState, refs: ReferenceBundle, order: int = 2) -> np.ndarray:
    """Scalar curvature of the product: base curvature plus 2 / A(t) from the round fiber."""
    return _base_curvature(state, refs, order) + 2.0 / refs.classes.fiber_coefficient(state.t)


def twisted_scalar(state: FlowState, refs: ReferenceBundle, order: int = 2) -> np.ndarray:
    """R~ = R - (1/T_max) tr_omega(omega0).

    The fiber contributes 2/A(t) to R and (1/T_max) a / A(t) = 2/A(t) to the
    twist trace, so for the twisted flow the fiber cancels exactly and
    R~ = R_base - (2b/a) FS / rho_omega. The normalized flow has no twist.
    """
    classes = refs.classes
    base = _base_curvature(state, refs, order)
    if classes.mode == "twisted":
        return base - classes.twist() * refs.omega0_base.values / state.omega
    return base + 2.0 / classes.fiber_coefficient(state.t)


@dataclass(frozen=True)
class TraceMonitors:
    sup_trace_chi: float
    sup_trace_omega0: float
    ratio_min: float
    ratio_max: float


def trace_monitors(state: FlowState, refs: ReferenceBundle) -> TraceMonitors:
    """Trace bounds against chi* and e^-t omega0, and the equivalence ratio range.

    tr chi* = rho_chi* / rho_omega; tr(e^-t omega0) = e^-t a / A(t) (fiber,
    equal to 1 when twisted) + e^-t b FS / rho_omega;
    r = rho_omega / (e^-t b FS + rho_chi*).
    """
    decay = math.exp(-state.t)
    omega0_part = decay * refs.omega0_base.values
    fiber = decay * refs.classes.a / refs.classes.fiber_coefficient(state.t)
    trace_chi = refs.chi_star.values / state.omega
    trace_omega0 = fiber + omega0_part / state.omega
    ratio = state.omega / (omega0_part + refs.chi_star.values)
    return TraceMonitors(
        sup_trace_chi=float(trace_chi.max()),
        sup_trace_omega0=float(trace_omega0.max()),
        ratio_min=float(ratio.min()),
        ratio_max=float(ratio.max()),
    )


def monitor_mask(refs: ReferenceBundle, config: ModelConfig, margin: int = 3) -> np.ndarray:
    """Nodes with |s| <= monitor_window where pointwise curvature is resolved."""
    return refs.grid.window(-config.monitor_window, config.monitor_window, margin)


def u_diagnostics(state: FlowState, refs: ReferenceBundle, mask: np.ndarray):
    """(sup t |grad u|^2, inf t Lap u) over the mask, u = phi_dot + phi + delta eta."""
    h = refs.grid.spacing
    u = state.phi_dot + state.phi + refs.delta * refs.eta
    gradient = centered_first_difference(u, h)
    laplacian = (
        centered_second_difference(state.phi_dot, h)
        + second_difference(state.increments, h, refs.left_lambda, refs.chi_star.right_exponent)
        + refs.delta * refs.eta_ss
    ) / state.omega
    grad_sq = gradient[mask] ** 2 / state.omega[mask]
    return state.t * float(grad_sq.max()), state.t * float(laplacian[mask].min())


def weighted_trace_defect(
    state: FlowState, refs: ReferenceBundle, chibar: np.ndarray, gamma: float
) -> tuple:
    """(sup of the positive part, sup of the absolute value) of norm_S^gamma (tr_omega chibar - 1)."""
    interior = refs.grid.interior()
    weight = np.exp(gamma * refs.log_norm[interior])
    defect = weight * (chibar[interior] / state.omega[interior] - 1.0)
    return float(max(defect.max(), 0.0)), float(np.abs(defect).max())


def away_from_cone(refs: ReferenceBundle, config: ModelConfig) -> np.ndarray:
    """Window |s| <= gke_window minus the cone region s < 2 log eps + cone_exclusion."""
    mask = refs.grid.window(-config.gke_window, config.gke_window)
    if refs.eps > 0.0 and refs.beta < 1.0:
        mask &= refs.grid.nodes >= 2.0 * math.log(refs.eps) + config.cone_exclusion
    return mask


def local_c0_defect(state: FlowState, chibar: np.ndarray, mask: np.ndarray) -> float:
    """sup over the mask of |rho_omega / rho_chibar - 1| (local uniform convergence away from the cone)."""
    return float(np.max(np.abs(state.omega[mask] / chibar[mask] - 1.0)))


def phi_dot_evolution_defect(
    previous: FlowState, current: FlowState, refs: ReferenceBundle, mask: np.ndarray
) -> float:
    """sup over the mask of |d/dt phi_dot + R~ + c + phi_dot - (1-beta) theta_eps / rho_omega|.

    Along the reduced flow d/dt phi_dot = -R~ - c - phi_dot + (1-beta) theta_eps / rho_omega
    with c = 1 for the twisted flow and 2 for the normalized one; the time
    derivative is the backward difference over the last step.
    """
    dt = current.t - previous.t
    derivative = (current.phi_dot - previous.phi_dot) / dt
    twisted = twisted_scalar(current, refs)
    current_term = (1.0 - refs.beta) * refs.current / current.omega
    defect = derivative + twisted + refs.classes.trace_offset() + current.phi_dot - current_term
    return float(np.max(np.abs(defect[mask])))


def record_diagnostics(
    state: FlowState,
    refs: ReferenceBundle,
    config: ModelConfig,
    limit=None,
    previous: Optional[FlowState] = None,
    slack: float = 0.0,
    dt: Optional[float] = None,
) -> Dict[str, float]:
    """One complete DiagnosticsSeries row for the state.

    Limit-dependent monitors are 0 when no limit solution is supplied
    (normalized runs); the summary flags them.
    """
    mask = monitor_mask(refs, config)
    order = config.curvature_order
    omega_density = Density(refs.grid, state.omega, refs.left_lambda, 1.0, refs.chi_star.cone_angle, "omega")

    total = total_scalar(state, refs, order)[mask]
    twisted = twisted_scalar(state, refs, order)[mask]
    traces = trace_monitors(state, refs)
    grad_sup, lap_inf = u_diagnostics(state, refs, mask)

    area = float(trapezoid(state.omega, refs.grid.nodes))
    row = {
        "t": state.t,
        "dt": config.dt if dt is None else dt,
        "area_defect": abs(area - refs.base_area(state.t)),
        "fiber_area": refs.classes.fiber_coefficient(state.t),
        "sup_phi": state.sup_phi(),
        "sup_phi_dot": state.sup_phi_dot(),
        "scalar_max": float(total.max()),
        "scalar_min": float(total.min()),
        "sup_abs_scalar": float(np.abs(total).max()),
        "sup_abs_twisted": float(np.abs(twisted).max()),
        "sup_trace_chi": traces.sup_trace_chi,
        "sup_trace_omega0": traces.sup_trace_omega0,
        "ratio_min": traces.ratio_min,
        "ratio_max": traces.ratio_max,
        "t_grad_u_sup": grad_sup,
        "t_lap_u_inf": lap_inf,
        "max_principle_slack": slack if math.isfinite(slack) else 0.0,
    }

    if previous is not None and state.t > previous.t:
        row["phi_dot_evolution_defect"] = phi_dot_evolution_defect(previous, state, refs, mask)
    else:
        row["phi_dot_evolution_defect"] = 0.0

    gamma = config.weight_gamma
    if limit is not None:
        chibar = limit.chibar_density.values
        v = state.phi + refs.delta * refs.eta - limit.psi
        row["sup_v"] = float(np.max(np.abs(v)))
        row["sup_u_minus_psi"] = float(np.max(np.abs(v + state.phi_dot)))
        row["trace_defect_pos"], row["trace_defect_abs"] = weighted_trace_defect(state, refs, chibar, gamma)
        row["trace_defect_pos_2"], row["trace_defect_abs_2"] = weighted_trace_defect(
            state, refs, chibar, 2.0 * gamma
        )
        row["local_c0_defect"] = local_c0_defect(state, chibar, away_from_cone(refs, config))
        row["gh_bound"] = gh_upper_bound(omega_density, state.t, limit.chibar_density, config)
    else:
        for key in (
            "sup_v",
            "sup_u_minus_psi",
            "trace_defect_pos",
            "trace_defect_abs",
            "trace_defect_pos_2",
            "trace_defect_abs_2",
            "local_c0_defect",
            "gh_bound",
        ):
            row[key] = 0.0

    base = pole_to_pole(omega_density)
    fiber = fiber_diameter(state.t, config)
    decay = math.exp(-state.t)
    reference = Density(
        refs.grid,
        decay * refs.omega0_base.values + refs.chi_star.values,
        refs.left_lambda,
        1.0,
        refs.chi_star.cone_angle,
        "reference",
    )
    row["base_diameter"] = base
    row["fiber_diameter"] = fiber
    row["total_diameter"] = math.hypot(fiber, base)
    # The reference metric e^-t omega0 + chi* has the same fiber as omega(t).
    row["reference_diameter"] = math.hypot(fiber, pole_to_pole(reference))

    for k, eps_gh in enumerate(config.metric.gh_radii):
        try:
            row[f"nbhd_{k}"] = neighborhood_diameter(omega_density, state.t, refs, config, eps_gh)
        except UnresolvedRegion as e:
            logger.debug(f"nbhd_{k} at t={state.t:.4g}: {e}")
            row[f"nbhd_{k}"] = float("nan")
    return row


@dataclass(frozen=True)
class DecayFit:
    """Least-squares line through (t, log value)."""

    rate: float
    intercept: float
    rms: float
    samples: int


def fit_decay(times: np.ndarray, values: np.ndarray, window: Sequence[float]) -> DecayFit:
    """Fit log(value) = intercept - rate * t over t in window.

    Raises:
        TooFewSamples: If fewer than 8 samples fall in the window.
        NonpositiveValue: If a sample in the window is <= 0.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    t_lo, t_hi = window
    mask = (times >= t_lo - 1e-12) & (times <= t_hi + 1e-12)
    count = int(mask.sum())
    if count < MIN_FIT_SAMPLES:
        raise TooFewSamples(
            f"window [{t_lo:g}, {t_hi:g}] unsatisfied: {count} samples (< {MIN_FIT_SAMPLES})"
        )
    selected = values[mask]
    if np.any(selected <= 0.0):
        raise NonpositiveValue(f"decay fit needs positive values in [{t_lo:g}, {t_hi:g}]")

    t = times[mask]
    logs = np.log(selected)
    slope, intercept = np.polyfit(t, logs, 1)
    residuals = logs - (slope * t + intercept)
    rms = float(np.sqrt(np.mean(residuals**2)))
    return DecayFit(rate=float(-slope), intercept=float(intercept), rms=rms, samples=count)


@dataclass
class SmoothingReport:
    """Instant-smoothing table across the ladder."""

    t0: float
    t_min: float
    weighted_sup: Dict[float, float]
    early_sup: Dict[float, float]
    weighted_drift: float
    early_growth: List[float]
    consistent: bool


def instant_smoothing_report(
    series_by_eps: Mapping[float, DiagnosticsSeries], t0: float, t_min: float
) -> SmoothingReport:
    """M(eps) = sup over [t_min, t0] of t sup_s |R| per rung, and the early-time trend.

    Consistent with a C/t bound when M drifts by less than 20% across the two
    finest rungs while sup_s |R| at t_min grows by at least 50% per halving.
    """
    ladder = sorted(series_by_eps, reverse=True)
    weighted, early = {}, {}
    for eps in ladder:
        series = series_by_eps[eps]
        mask = series.window(t_min, t0)
        t = series.times[mask]
        sup_r = series.column("sup_abs_scalar")[mask]
        weighted[eps] = float(np.max(t * sup_r))
        early[eps] = float(sup_r[0])

    drift = float("nan")
    if len(ladder) >= 2:
        a, b = weighted[ladder[-2]], weighted[ladder[-1]]
        drift = abs(b - a) / max(abs(a), 1e-300)
    growth = [early[f] / early[c] for c, f in zip(ladder, ladder[1:])]
    consistent = len(ladder) >= 2 and drift < 0.2 and all(g >= 1.5 for g in growth)
    logger.info(f"Instant smoothing: M drift {drift:.3f}, early growth {growth}")
    return SmoothingReport(t0, t_min, weighted, early, drift, growth, consistent)
