"""Elliptic limit equation of the collapsing flow and its Kahler-Einstein identity.

On rung eps the limit potential solves

    N(psi) = log[(rho_chi + psi'') / rho_chi] - psi - log G - log cone_weight = 0,

equivalently log(rho_chi + psi'') - psi - log W_eps = 0 with the flow's
volume density W_eps. The e^psi factor fixes the additive constant.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import solve_banded

from chart_geometry import (
    Density,
    ReferenceBundle,
    build_reference,
    centered_second_difference,
    second_difference,
    second_difference_bands,
    values_from_increments,
)
from config import ModelConfig
from curvature_estimates import away_from_cone
from error_handling import (
    ErrorHandler,
    NewtonDivergence,
    NonpositiveArgument,
    PositivityLoss,
    RetryConfig,
)
from persistence import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimitSolution:
    """Converged limit potential of one rung.

    psi is held, like flow potentials, as its value at s_min plus first
    differences; chibar_density is rho_chi + psi''.
    """

    eps: float
    anchor: float
    increments: np.ndarray = field(repr=False)
    residual_norm: float
    chibar_density: Density = field(repr=False)
    iterations: int = 0
    psi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "psi", values_from_increments(self.anchor, self.increments))


def _limit_density(increments: np.ndarray, refs: ReferenceBundle) -> np.ndarray:
    return refs.chi.values + second_difference(
        increments, refs.grid.spacing, refs.left_lambda, refs.chi_star.right_exponent
    )


def limit_residual(anchor: float, increments: np.ndarray, refs: ReferenceBundle) -> np.ndarray:
    """N(psi) at every node.

    Raises:
        NonpositiveArgument: If rho_chi + psi'' <= 0 somewhere.
    """
    rho = _limit_density(increments, refs)
    bad = np.flatnonzero(~(rho > 0.0))
    if bad.size:
        node = int(bad[0])
        raise NonpositiveArgument(
            f"rho_chi + psi'' = {rho[node]:.3e} <= 0", node=node, s=float(refs.grid.nodes[node])
        )
    psi = values_from_increments(anchor, increments)
    return np.log(rho) - psi - refs.log_weight


def _newton_bands(rho: np.ndarray, refs: ReferenceBundle) -> np.ndarray:
    """Rows of dN = diag(1/rho) D2 - I, each multiplied by rho."""
    bands = second_difference_bands(
        refs.grid.n_nodes, refs.grid.spacing, refs.left_lambda, refs.chi_star.right_exponent
    )
    bands[1] -= rho
    return bands


def solve_limit(
    refs: ReferenceBundle,
    config: ModelConfig,
    initial_guess: Optional[np.ndarray] = None,
) -> LimitSolution:
    """Damped Newton iteration for the limit potential of the rung of refs.

    Steps are halved while the trial density loses positivity or the
    residual sup-norm fails to decrease. Once below limit_tol one more
    full step is taken.

    Args:
        refs: References of the rung.
        config: Supplies limit_tol, limit_max_iter and limit_damping_budget.
        initial_guess: Node values of a starting potential; zero if None.

    Raises:
        PositivityLoss: If the starting potential or every damped step is not admissible.
        NewtonDivergence: If the damping budget or the iteration cap is exhausted.
    """
    n = refs.grid.n_nodes
    if initial_guess is None:
        anchor, increments = 0.0, np.zeros(n - 1)
    else:
        guess = np.asarray(initial_guess, dtype=float)
        anchor, increments = float(guess[0]), np.diff(guess)

    residual = limit_residual(anchor, increments, refs)
    norm = float(np.max(np.abs(residual)))
    polished = norm < config.limit_tol
    for iteration in range(1, config.limit_max_iter + 1):
        rho = _limit_density(increments, refs)
        delta = solve_banded((1, 1), _newton_bands(rho, refs), -rho * residual)
        delta_increments = np.diff(delta)

        alpha = 1.0
        for _ in range(config.limit_damping_budget):
            trial_increments = increments + alpha * delta_increments
            trial_anchor = anchor + alpha * delta[0]
            try:
                trial = limit_residual(trial_anchor, trial_increments, refs)
            except PositivityLoss:
                alpha *= 0.5
                continue
            trial_norm = float(np.max(np.abs(trial)))
            # The polishing step only has to stay at rounding level.
            if trial_norm < norm or (polished and trial_norm < config.limit_tol):
                break
            alpha *= 0.5
        else:
            raise NewtonDivergence(
                f"limit Newton exhausted {config.limit_damping_budget} halvings at eps={refs.eps:g} "
                f"(residual {norm:.3e})",
                residual=norm,
            )
        if alpha < 1.0:
            logger.warning(f"Limit Newton step damped to {alpha:g} at eps={refs.eps:g}")

        anchor, increments, residual, norm = trial_anchor, trial_increments, trial, trial_norm
        logger.debug(f"Limit Newton iteration {iteration}: residual {norm:.3e}")
        if polished:
            break
        if norm < config.limit_tol:
            polished = True
    else:
        if norm >= config.limit_tol:
            raise NewtonDivergence(
                f"limit Newton did not reach {config.limit_tol:.1e} in {config.limit_max_iter} iterations "
                f"(residual {norm:.3e})",
                residual=norm,
            )

    chibar = Density(
        refs.grid,
        _limit_density(increments, refs),
        refs.left_lambda,
        1.0,
        refs.chi_star.cone_angle,
        name=f"chibar(eps={refs.eps:g})",
    )
    logger.info(f"Limit solved at eps={refs.eps:g}: residual {norm:.3e} after {iteration} iterations")
    return LimitSolution(
        eps=refs.eps,
        anchor=anchor,
        increments=increments,
        residual_norm=norm,
        chibar_density=chibar,
        iterations=iteration,
    )


@dataclass
class LimitLadder:
    """Limit solutions along the ladder, largest eps first."""

    solutions: Dict[float, LimitSolution]
    cauchy: List[float] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.cauchy, self.cauchy[1:]))


def solve_limit_ladder(config: ModelConfig, ladder: Optional[List[float]] = None) -> LimitLadder:
    """Continuation over the ladder: cold start at the largest eps, warm starts below.

    A failed warm start falls back to a cold start at the same rung.
    """
    ladder = sorted(ladder or config.epsilon_ladder, reverse=True)
    handler = ErrorHandler(RetryConfig(max_retries=0))
    solutions: Dict[float, LimitSolution] = {}
    previous: Optional[LimitSolution] = None

    for eps in ladder:
        refs = build_reference(config, eps)
        cold = lambda refs=refs: solve_limit(refs, config)
        if previous is None:
            solution = cold()
        else:
            guess = previous.psi
            solution = handler.retry_with_fallback(
                lambda refs=refs, guess=guess: solve_limit(refs, config, guess),
                cold,
                function_name=f"solve_limit(eps={eps:g})",
            )
        solutions[eps] = solution
        previous = solution

    cauchy = [
        float(np.max(np.abs(solutions[a].psi - solutions[b].psi))) for a, b in zip(ladder, ladder[1:])
    ]
    result = LimitLadder(solutions, cauchy)
    if not result.monotone:
        logger.warning(f"Limit ladder differences are not decreasing: {cauchy}")
    return result


@dataclass(frozen=True)
class GkeReport:
    """Kahler-Einstein identity residual of a limit solution.

    residual is NaN outside the window [s_lo, s_hi].
    """

    eps: float
    residual: np.ndarray = field(repr=False)
    sup: float
    trace_sup: float
    s_lo: float
    s_hi: float


def verify_gke(sol: LimitSolution, refs: ReferenceBundle, config: ModelConfig) -> GkeReport:
    """Residual of -(log rho_chibar)'' + rho_chibar - (2b/a) FS - (1-beta) theta_eps.

    Evaluated at interior nodes with |s| <= gke_window, two spacings off the
    ends and outside the cone region. The trace form divides by rho_chibar:
    tr_chibar Ric(chibar) + 1 - (2b/a) FS / rho_chibar - (1-beta) theta / rho_chibar.
    """
    rho = sol.chibar_density.values
    curvature_term = -centered_second_difference(np.log(rho), refs.grid.spacing)
    twist = 2.0 * refs.classes.b / refs.classes.a
    full = curvature_term + rho - twist * refs.fs.values - (1.0 - refs.beta) * refs.current

    mask = away_from_cone(refs, config)
    residual = np.full(rho.shape, np.nan)
    residual[mask] = full[mask]
    nodes = refs.grid.nodes[mask]
    sup = float(np.max(np.abs(full[mask])))
    trace_sup = float(np.max(np.abs(full[mask] / rho[mask])))
    logger.info(f"GKE residual at eps={sol.eps:g}: sup {sup:.3e} on [{nodes[0]:.3g}, {nodes[-1]:.3g}]")
    return GkeReport(sol.eps, residual, sup, trace_sup, float(nodes[0]), float(nodes[-1]))


def smooth_guess(refs: ReferenceBundle, rng: np.random.Generator) -> np.ndarray:
    """Random admissible starting potential: a constant plus bumps shaped like chi.

    Second derivatives of x(1-x) and x(1-x)(2x-1) stay within a few multiples
    of x(1-x), so amplitudes of 0.2 c_chi keep rho_chi + psi'' positive.
    """
    s = refs.grid.nodes
    bump = refs.fs.values
    odd = bump * np.tanh(0.5 * s)
    c0 = rng.uniform(-1.0, 1.0)
    c1, c2 = rng.uniform(-0.2, 0.2, size=2) * refs.classes.c_chi
    return c0 + c1 * bump + c2 * odd


def uniqueness_probe(
    refs: ReferenceBundle,
    config: ModelConfig,
    n_guesses: int = 5,
    seed: int = 0,
    reference: Optional[LimitSolution] = None,
) -> float:
    """Largest sup-norm spread of limit solutions started from random smooth guesses."""
    reference = reference or solve_limit(refs, config)
    rng = np.random.default_rng(seed)
    spread = 0.0
    for k in range(n_guesses):
        solution = solve_limit(refs, config, smooth_guess(refs, rng))
        spread = max(spread, float(np.max(np.abs(solution.psi - reference.psi))))
        logger.debug(f"Uniqueness probe guess {k}: spread {spread:.3e}")
    logger.info(f"Uniqueness probe at eps={refs.eps:g}: spread {spread:.3e} over {n_guesses} guesses")
    return spread


def save_limit(path, sol: LimitSolution, config: ModelConfig):
    """Write a LimitSolution in the checkpoint format."""
    header = {
        "config_hash": config.config_hash(),
        "kind": "limit",
        "eps": sol.eps,
        "anchor": sol.anchor,
        "residual_norm": sol.residual_norm,
        "iterations": sol.iterations,
    }
    save_checkpoint(Path(path), header, {"increments": sol.increments, "psi": sol.psi})


def load_limit(path, config: ModelConfig, refs: Optional[ReferenceBundle] = None) -> LimitSolution:
    """Read a stored LimitSolution and rebuild its density on the rung's grid."""
    header, arrays = load_checkpoint(path, config.config_hash())
    refs = refs or build_reference(config, header["eps"])
    increments = arrays["increments"]
    chibar = Density(
        refs.grid,
        _limit_density(increments, refs),
        refs.left_lambda,
        1.0,
        refs.chi_star.cone_angle,
        name=f"chibar(eps={header['eps']:g})",
    )
    return LimitSolution(
        eps=float(header["eps"]),
        anchor=float(header["anchor"]),
        increments=increments,
        residual_norm=float(header["residual_norm"]),
        chibar_density=chibar,
        iterations=int(header["iterations"]),
    )

