"""Backward-Euler integration of the reduced parabolic Monge-Ampere flow.

On rung eps the potential obeys

    d/dt phi = log[(chi_t + delta eta'' + phi'') / W_eps] - phi - delta eta + fiber term,

with W_eps = (norm_S + eps^2)^-(1-beta) Omega. The fiber term is zero for
the twisted flow and log(A(t)/a) for the normalized flow.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from chart_geometry import (
    ReferenceBundle,
    build_reference,
    second_difference,
    second_difference_bands,
    values_from_increments,
)
from config import ModelConfig
from curvature_estimates import DiagnosticsSeries, diagnostic_columns, record_diagnostics
from error_handling import (
    ErrorHandler,
    NewtonDivergence,
    NonpositiveArgument,
    PositivityLoss,
    StepController,
)
from persistence import load_checkpoint, save_checkpoint
from state import FlowState

logger = logging.getLogger(__name__)

# Halvings of a Newton step before positivity loss is reported.
_MAX_DAMPING = 20
# Relative size of the finite-difference perturbations in the Jacobian check.
_FD_SCALE = 1e-4
# Largest maximum-principle slack accepted as solver noise.
SLACK_TOL = 1e-6


@dataclass
class RungRun:
    """Outcome of one flow run.

    Attributes:
        eps: Regularization parameter of the rung.
        trajectory: FlowState at every sample time reached.
        series: Diagnostics, one row per sample.
        completed: True when t_end was reached.
        rejected_steps: Steps rejected and retried with a halved dt.
        worst_slack: Largest maximum-principle slack over accepted steps.
        error: Message of the failure that stopped the run, if any.
    """

    eps: float
    trajectory: List[FlowState]
    series: DiagnosticsSeries
    completed: bool = True
    rejected_steps: int = 0
    worst_slack: float = float("-inf")
    error: Optional[str] = None
    error_type: Optional[str] = None

    @property
    def final(self) -> FlowState:
        return self.trajectory[-1]


@dataclass
class LadderResult:
    """All rungs of an epsilon ladder plus the Cauchy report."""

    runs: Dict[float, RungRun]
    cauchy: List[float] = field(default_factory=list)
    non_cauchy: bool = False
    partial: bool = False

    @property
    def finest(self) -> Optional[RungRun]:
        """The conical approximand: the smallest completed eps."""
        done = [eps for eps, run in self.runs.items() if run.completed]
        return self.runs[min(done)] if done else None


def metric_density(increments: np.ndarray, t: float, refs: ReferenceBundle) -> np.ndarray:
    """chi_t + delta eta'' + phi'' on the grid."""
    return refs.reference_values(t) + second_difference(
        increments, refs.grid.spacing, refs.left_lambda, refs.chi_star.right_exponent
    )


def _evaluate(
    anchor: float, increments: np.ndarray, t: float, refs: ReferenceBundle
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Potential values, metric density and right-hand side F at time t."""
    phi = values_from_increments(anchor, increments)
    omega = metric_density(increments, t, refs)
    bad = np.flatnonzero(~(omega > 0.0))
    if bad.size:
        node = int(bad[0])
        raise NonpositiveArgument(
            f"log argument {omega[node]:.3e} <= 0 at t={t:.6g}",
            node=node,
            s=float(refs.grid.nodes[node]),
        )
    rhs = (
        np.log(omega)
        - refs.log_weight
        - phi
        - refs.delta * refs.eta
        + refs.classes.fiber_log_term(t)
    )
    return phi, omega, rhs


def flow_rhs(state: FlowState, refs: ReferenceBundle) -> np.ndarray:
    """Right-hand side F(phi) of the potential equation at the state's time.

    Raises:
        NonpositiveArgument: If chi_t + delta eta'' + phi'' <= 0 at some node.
    """
    _, _, rhs = _evaluate(state.anchor, state.increments, state.t, refs)
    return rhs


def linearized_rhs(state: FlowState, refs: ReferenceBundle, direction: np.ndarray) -> np.ndarray:
    """Analytic linearization v -> v''/rho_omega - v of F at the state."""
    v_second = second_difference(
        np.diff(direction), refs.grid.spacing, refs.left_lambda, refs.chi_star.right_exponent
    )
    return v_second / state.omega - direction


def initial_state(refs: ReferenceBundle) -> FlowState:
    """phi = 0 at t = 0; the metric is the model initial metric."""
    increments = np.zeros(refs.grid.n_nodes - 1)
    _, omega, rhs = _evaluate(0.0, increments, 0.0, refs)
    return FlowState(t=0.0, anchor=0.0, increments=increments, phi_dot=rhs, eps=refs.eps, omega=omega)


def _scaled_jacobian(omega: np.ndarray, dt: float, refs: ReferenceBundle) -> np.ndarray:
    """Rows of J = (1+dt) I - dt diag(1/omega) D2, each multiplied by omega/dt."""
    bands = -second_difference_bands(
        refs.grid.n_nodes, refs.grid.spacing, refs.left_lambda, refs.chi_star.right_exponent
    )
    bands[1] += omega * (1.0 + dt) / dt
    return bands


def jacobian_bands(state: FlowState, dt: float, refs: ReferenceBundle) -> np.ndarray:
    """Newton matrix of the backward-Euler residual, unscaled banded storage."""
    bands = _scaled_jacobian(state.omega, dt, refs)
    # Row i of the scaled matrix sits in column i of the diagonal and shifted
    # columns of the off-diagonals.
    row_scale = dt / state.omega
    bands[0, 1:] *= row_scale[:-1]
    bands[1, :] *= row_scale
    bands[2, :-1] *= row_scale[1:]
    return bands


def step_implicit(state: FlowState, dt: float, refs: ReferenceBundle, config: ModelConfig) -> FlowState:
    """One backward-Euler step: phi_new - phi_old = dt * F_{t+dt}(phi_new).

    Newton on the tridiagonal linearization, damped by halving whenever the
    trial metric density loses positivity.

    Raises:
        NewtonDivergence: If the residual is above newton_tol after newton_max_iter iterations.
        PositivityLoss: If no damped step keeps the metric positive.
    """
    t_new = state.t + dt
    phi_old = state.phi
    anchor = state.anchor
    increments = state.increments.copy()

    norm = float("inf")
    for iteration in range(config.newton_max_iter + 1):
        phi, omega, rhs = _evaluate(anchor, increments, t_new, refs)
        residual = phi - phi_old - dt * rhs
        norm = float(np.max(np.abs(residual)))
        if norm < config.newton_tol:
            logger.debug(f"Newton converged in {iteration} iterations at t={t_new:.6g}")
            return FlowState(
                t=t_new,
                anchor=anchor,
                increments=increments,
                phi_dot=rhs,
                eps=state.eps,
                omega=omega,
                step=state.step + 1,
            )
        if iteration == config.newton_max_iter:
            break

        delta = solve_banded((1, 1), _scaled_jacobian(omega, dt, refs), -omega * residual / dt)
        delta_increments = np.diff(delta)
        alpha = 1.0
        for _ in range(_MAX_DAMPING):
            trial = increments + alpha * delta_increments
            if np.all(metric_density(trial, t_new, refs) > 0.0):
                anchor += alpha * delta[0]
                increments = trial
                break
            alpha *= 0.5
        else:
            raise PositivityLoss(f"damped Newton step cannot keep the metric positive at t={t_new:.6g}")
        if alpha < 1.0:
            logger.debug(f"Newton step damped to {alpha:g} at t={t_new:.6g}")

    raise NewtonDivergence(
        f"Newton did not reach {config.newton_tol:.1e} in {config.newton_max_iter} iterations "
        f"(residual {norm:.3e}, dt={dt:.3e})",
        residual=norm,
    )


def area_defect(state: FlowState, refs: ReferenceBundle) -> float:
    """|area(omega(t)) - class area from the mixing formula|."""
    area = float(trapezoid(state.omega, refs.grid.nodes))
    return abs(area - refs.base_area(state.t))


def max_principle_slack(
    old: FlowState, new: FlowState, refs: ReferenceBundle, lam: float
) -> float:
    """Discrete maximum-principle defect of one accepted step.

    At the argmax of H = phi + lam log norm_S the discrete second difference
    of H is nonpositive, so the Laplacian term may be dropped:
    (phi_new - phi_old)/dt <= log[(chi_t + delta eta'' - lam D2 log norm_S)/W] - phi - delta eta.
    Returns left minus right side at the argmax; nonpositive up to solver tolerance.
    """
    dt = new.t - old.t
    h = refs.grid.spacing
    weight = new.phi + lam * refs.log_norm
    node = int(np.argmax(weight))
    log_norm_second = second_difference(
        np.diff(refs.log_norm), h, refs.left_lambda, refs.chi_star.right_exponent
    )
    bound_density = refs.reference_values(new.t)[node] - lam * log_norm_second[node]
    bound = (
        math.log(bound_density)
        - refs.log_weight[node]
        - new.phi[node]
        - refs.delta * refs.eta[node]
        + refs.classes.fiber_log_term(new.t)
    )
    return float((new.phi[node] - old.phi[node]) / dt - bound)


def jacobian_fd_error(state: FlowState, refs: ReferenceBundle, dt: float) -> float:
    """Largest row-relative gap between the Newton matrix and finite differences.

    The residual R(phi) = phi - phi_state - dt F(phi) is differentiated at the
    state itself with central differences; nodes three apart are perturbed
    together. Steps scale with omega h^2 so that the perturbed metric stays
    positive in the tails.
    """
    h = refs.grid.spacing
    n = refs.grid.n_nodes
    t = state.t
    bands = jacobian_bands(state, dt, refs)
    steps = _FD_SCALE * state.omega * h * h

    def residual(anchor: float, increments: np.ndarray) -> np.ndarray:
        phi, _, rhs = _evaluate(anchor, increments, t, refs)
        return phi - state.phi - dt * rhs

    worst = 0.0
    for color in range(3):
        perturbation = np.zeros(n)
        perturbation[color::3] = steps[color::3]
        d_inc = np.diff(perturbation)
        plus = residual(state.anchor + perturbation[0], state.increments + d_inc)
        minus = residual(state.anchor - perturbation[0], state.increments - d_inc)
        column_derivative = (plus - minus) / 2.0

        for offset, band_row in ((-1, 2), (0, 1), (1, 0)):
            rows = np.arange(n)
            cols = rows + offset
            valid = (cols >= 0) & (cols < n) & (cols % 3 == color)
            rows, cols = rows[valid], cols[valid]
            fd = column_derivative[rows] / steps[cols]
            analytic = bands[band_row, cols]
            scale = np.abs(bands[1, rows])
            worst = max(worst, float(np.max(np.abs(fd - analytic) / scale)))
    return worst


def sample_times(config: ModelConfig) -> np.ndarray:
    """0, early geometric samples t_min 2^k below sample_dt, then a uniform cadence to t_end."""
    times = [0.0]
    k = 0
    while config.t_min * 2.0**k < config.sample_dt - 1e-12:
        times.append(config.t_min * 2.0**k)
        k += 1
    n = int(math.floor(config.t_end / config.sample_dt + 1e-9))
    times.extend(i * config.sample_dt for i in range(1, n + 1))
    if times[-1] < config.t_end - 1e-12:
        times.append(config.t_end)
    return np.array(sorted(set(times)))


def _state_from_arrays(t, anchor, increments, phi_dot, eps, step, refs) -> FlowState:
    omega = metric_density(increments, t, refs)
    return FlowState(t=t, anchor=anchor, increments=increments, phi_dot=phi_dot, eps=eps, omega=omega, step=step)


def run_flow(
    config: ModelConfig,
    eps: float,
    refs: Optional[ReferenceBundle] = None,
    limit=None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
) -> RungRun:
    """Integrate rung eps to t_end with adaptive halving and diagnostics at every sample.

    Args:
        config: Validated configuration.
        eps: Regularization parameter (> 0).
        refs: Prebuilt references of the rung.
        limit: LimitSolution at the same eps for the convergence monitors.
        checkpoint_path: Where to write checkpoints; None disables them.
        resume: Continue from checkpoint_path if it exists.

    Returns:
        RungRun: Trajectory and diagnostics; `completed` is False when a
        solver error stopped the run, with outputs so far preserved.
    """
    refs = refs or build_reference(config, eps)
    times = sample_times(config)
    columns = diagnostic_columns(config)
    series = DiagnosticsSeries(columns)
    controller = StepController(config.dt)
    lam = config.lambda0

    trajectory: List[FlowState] = []
    sample_index = 0
    rejected = 0
    worst_slack = float("-inf")
    slack_since_sample = float("-inf")

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        header, arrays = load_checkpoint(checkpoint_path, config.config_hash())
        for k in range(arrays["anchors"].size):
            trajectory.append(
                _state_from_arrays(
                    float(arrays["times"][k]),
                    float(arrays["anchors"][k]),
                    arrays["increment_samples"][k],
                    arrays["phi_dot_samples"][k],
                    eps,
                    int(arrays["steps"][k]),
                    refs,
                )
            )
        series = DiagnosticsSeries.from_array(header["columns"], arrays["rows"])
        state = trajectory[-1]
        previous = _state_from_arrays(
            float(header["previous_t"]),
            float(arrays["previous_anchor"][0]),
            arrays["previous_increments"],
            arrays["previous_phi_dot"],
            eps,
            state.step - 1,
            refs,
        ) if header["previous_t"] is not None else None
        controller.restore(header["dt"], header["clean_steps"])
        sample_index = int(header["sample_index"])
        rejected = int(header["rejected_steps"])
        worst_slack = float(header["worst_slack"])
        logger.info(f"Resumed eps={eps:g} at t={state.t:.6g} (sample {sample_index})")
        if header.get("completed"):
            return RungRun(eps, trajectory, series, True, rejected, worst_slack)
    else:
        state = initial_state(refs)
        previous = None
        trajectory.append(state)
        series.append(record_diagnostics(state, refs, config, limit, previous=None, slack=0.0))

    logger.info(f"Running flow for eps={eps:g} to t={config.t_end:g}")
    try:
        for sample_index in range(sample_index + 1, times.size):
            target = float(times[sample_index])
            while state.t < target:
                remaining = target - state.t
                dt = controller.dt
                clipped = dt >= remaining * (1.0 - 1e-9)
                if clipped:
                    dt = remaining
                try:
                    new = step_implicit(state, dt, refs, config)
                except (NewtonDivergence, PositivityLoss) as e:
                    rejected += 1
                    controller.reject(e)
                    continue
                if clipped:
                    new = new.advanced(t=target)
                controller.accept()
                slack = max_principle_slack(state, new, refs, lam)
                if slack > SLACK_TOL:
                    logger.warning(
                        f"Maximum-principle slack {slack:.3e} above {SLACK_TOL:.0e} at t={new.t:.6g} (eps={eps:g})"
                    )
                slack_since_sample = max(slack_since_sample, slack)
                worst_slack = max(worst_slack, slack)
                previous, state = state, new

            series.append(
                record_diagnostics(
                    state, refs, config, limit, previous=previous, slack=slack_since_sample, dt=controller.dt
                )
            )
            slack_since_sample = float("-inf")
            trajectory.append(state)

            last = sample_index == times.size - 1
            if checkpoint_path is not None and (last or sample_index % config.checkpoint_every == 0):
                _write_checkpoint(
                    checkpoint_path, config, eps, trajectory, previous, series,
                    controller, sample_index, rejected, worst_slack, completed=last,
                )
    except Exception as e:
        logger.error(f"Flow for eps={eps:g} stopped at t={state.t:.6g}: {e}")
        error_type = ErrorHandler().classify_error(e).value
        return RungRun(eps, trajectory, series, False, rejected, worst_slack, str(e), error_type)

    logger.info(
        f"Finished eps={eps:g}: sup|phi_dot|={state.sup_phi_dot():.3e}, "
        f"{rejected} rejected steps"
    )
    return RungRun(eps, trajectory, series, True, rejected, worst_slack)


def _write_checkpoint(
    path, config, eps, trajectory, previous, series, controller, sample_index, rejected, worst_slack, completed
):
    state = trajectory[-1]
    header = {
        "config_hash": config.config_hash(),
        "eps": eps,
        "t": state.t,
        "step": state.step,
        "sample_index": sample_index,
        "rejected_steps": rejected,
        "worst_slack": worst_slack,
        "previous_t": previous.t if previous is not None else None,
        "columns": series.columns,
        "completed": completed,
        **controller.snapshot(),
    }
    arrays = {
        "times": np.array([s.t for s in trajectory]),
        "steps": np.array([s.step for s in trajectory]),
        "anchors": np.array([s.anchor for s in trajectory]),
        "increment_samples": np.stack([s.increments for s in trajectory]),
        "phi_dot_samples": np.stack([s.phi_dot for s in trajectory]),
        "rows": series.to_array(),
    }
    if previous is not None:
        arrays["previous_anchor"] = np.array([previous.anchor])
        arrays["previous_increments"] = previous.increments
        arrays["previous_phi_dot"] = previous.phi_dot
    save_checkpoint(path, header, arrays)


def _run_rung(args) -> RungRun:
    config, eps, limit, checkpoint_path, resume = args
    return run_flow(config, eps, limit=limit, checkpoint_path=checkpoint_path, resume=resume)


def cauchy_differences(runs: List[RungRun]) -> List[float]:
    """sup over s and common sample times of |phi_k - phi_{k+1}| for consecutive rungs."""
    diffs = []
    for coarse, fine in zip(runs, runs[1:]):
        count = min(len(coarse.trajectory), len(fine.trajectory))
        diffs.append(
            max(
                float(np.max(np.abs(coarse.trajectory[k].phi - fine.trajectory[k].phi)))
                for k in range(count)
            )
        )
    return diffs


def epsilon_ladder(
    config: ModelConfig,
    limits: Optional[Dict[float, object]] = None,
    workers: int = 1,
    checkpoint_dir: Optional[Path] = None,
    resume: bool = False,
    ladder: Optional[List[float]] = None,
) -> LadderResult:
    """Run every rung of the ladder, in parallel when workers > 1.

    Rungs are independent, so the outputs do not depend on the worker count.
    The smallest completed eps is the conical approximand.
    """
    ladder = list(ladder or config.epsilon_ladder)
    limits = limits or {}
    jobs = []
    for eps in ladder:
        path = None
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"eps_{eps:g}" / "checkpoint.npz"
        jobs.append((config, eps, limits.get(eps), path, resume))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_rung, jobs))
    else:
        results = [_run_rung(job) for job in jobs]

    runs = {run.eps: run for run in results}
    result = LadderResult(runs=runs)
    result.partial = any(not run.completed for run in results)
    if result.partial:
        failed = [f"{run.eps:g}" for run in results if not run.completed]
        logger.warning(f"Partial ladder: rungs {', '.join(failed)} did not finish")

    completed = [run for run in results if run.completed]
    result.cauchy = cauchy_differences(completed)
    result.non_cauchy = any(b >= a for a, b in zip(result.cauchy, result.cauchy[1:]))
    if result.non_cauchy:
        logger.warning(f"Ladder differences are not decreasing: {result.cauchy}")
    return result


def integrate_fixed(refs: ReferenceBundle, config: ModelConfig, dt: float, steps: int) -> FlowState:
    """`steps` fixed backward-Euler steps of size dt, without monitors or adaptivity."""
    state = initial_state(refs)
    for _ in range(steps):
        state = step_implicit(state, dt, refs, config)
    return state


def richardson_order(config: ModelConfig, eps: float, t_end: Optional[float] = None) -> float:
    """Observed time order from steps dt, dt/2 and dt/4 up to t_end.

    The coarse step is shrunk so that t_end is a whole number of steps.
    """
    t_end = t_end or config.richardson_t_end
    steps = max(1, math.ceil(t_end / config.dt - 1e-9))
    refs = build_reference(config, eps)
    coarse, mid, fine = (
        integrate_fixed(refs, config, t_end / (k * steps), k * steps).phi for k in (1, 2, 4)
    )
    ratio = np.max(np.abs(coarse - mid)) / np.max(np.abs(mid - fine))
    order = math.log2(ratio)
    logger.info(f"Backward Euler observed order {order:.3f} at eps={eps:g}")
    return order
