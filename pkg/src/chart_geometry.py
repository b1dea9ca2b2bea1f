"""Reduced one-dimensional geometry of the P1 x P1 model fibration.

Everything lives on the base chart s = log|z|^2 of Y = P1. A rotationally
symmetric (1,1)-form is stored as a density rho(s) against the reference
form i dz^dz-bar / |z|^2; the cone point z = 0 sits at s = -inf and the
opposite pole at s = +inf. Both poles are represented through declared
exponential tails rather than grid points.

Area unit: the integral of rho over s, so area(FS) = 1, 2*pi[pt] = 1 and
2*pi*c1(K_P1) = -2.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import binom, expit, roots_legendre

from config import GridConfig, ModelConfig
from error_handling import ClassDegeneracy, PositivityLoss

logger = logging.getLogger(__name__)

# Panel length (in log u) and order of the composite Gauss-Legendre rule.
_PANEL_LENGTH = 2.0
_PANEL_ORDER = 24
# Switch point between the power series and the panel quadrature in eta.
_SERIES_LIMIT = 0.5
_SERIES_TERMS = 60


@dataclass(frozen=True)
class RadialGrid:
    """Uniform discretization of the truncated chart [s_min, s_max]."""

    s_min: float
    s_max: float
    n_nodes: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    spacing: float = field(init=False)

    def __post_init__(self):
        if not self.s_min < self.s_max:
            raise ValueError("s_min must be smaller than s_max")
        if self.n_nodes < 4:
            raise ValueError("a radial grid needs at least 4 nodes")
        nodes = np.linspace(self.s_min, self.s_max, self.n_nodes)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "spacing", (self.s_max - self.s_min) / (self.n_nodes - 1))

    @classmethod
    def from_config(cls, grid: GridConfig) -> "RadialGrid":
        """Build the grid described by a GridConfig."""
        return cls(grid.s_min, grid.s_max, grid.n_nodes)

    def interior(self) -> slice:
        """Slice of nodes that carry the centered stencil."""
        return slice(1, self.n_nodes - 1)

    def window(self, lo: float, hi: float, margin: int = 2) -> np.ndarray:
        """Boolean mask of nodes in [lo, hi], keeping `margin` nodes off each end."""
        mask = (self.nodes >= lo) & (self.nodes <= hi)
        mask[:margin] = False
        mask[self.n_nodes - margin :] = False
        return mask


@dataclass(frozen=True)
class Density:
    """A positive density rho(s) with its declared asymptotic tails.

    rho ~ c * exp(left_exponent * s) as s -> -inf and
    rho ~ c' * exp(-right_exponent * s) as s -> +inf. A cone of angle
    2*pi*beta at the cone point has left_exponent = beta.
    """

    grid: RadialGrid
    values: np.ndarray
    left_exponent: float = 1.0
    right_exponent: float = 1.0
    cone_angle: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.values.shape != self.grid.nodes.shape:
            raise ValueError(f"density {self.name!r} does not match its grid")

    def area(self) -> float:
        """Total mass over the truncated grid."""
        return float(trapezoid(self.values, self.grid.nodes))

    def scaled(self, factor: float, name: str = "") -> "Density":
        """A constant multiple of this density."""
        return replace(self, values=factor * self.values, name=name or self.name)

    def require_positive(self):
        """Raise PositivityLoss at the first nonpositive node."""
        bad = np.flatnonzero(~(self.values > 0.0))
        if bad.size:
            node = int(bad[0])
            raise PositivityLoss(
                f"density {self.name or 'rho'} is not positive",
                node=node,
                s=float(self.grid.nodes[node]),
            )

    def tail_errors(self, fraction: float = 0.1) -> Tuple[float, float]:
        """Relative deviation from the declared tails on the outer fraction of the grid.

        The constant of each tail is fitted at the outermost node.

        Returns:
            Tuple of (left error, right error).
        """
        s = self.grid.nodes
        n = max(2, int(fraction * self.grid.n_nodes))
        logv = np.log(self.values)

        left = slice(0, n)
        model = logv[0] + self.left_exponent * (s[left] - s[0])
        err_left = float(np.max(np.abs(np.expm1(logv[left] - model))))

        right = slice(self.grid.n_nodes - n, self.grid.n_nodes)
        model = logv[-1] - self.right_exponent * (s[right] - s[-1])
        err_right = float(np.max(np.abs(np.expm1(logv[right] - model))))
        return err_left, err_right


def fs_density(s):
    """Density of the Fubini-Study form with Ric(FS) = 2 FS.

    Equals e^s / (1 + e^s)^2, written in a form that is stable for large |s|.
    """
    s = np.asarray(s, dtype=float)
    return 0.25 / np.cosh(0.5 * s) ** 2


def norm_S(s):
    """Hermitian norm |S'|^2 = e^s / (1 + e^s) of the section cutting out the cone point."""
    return expit(np.asarray(s, dtype=float))


def log_norm_S(s):
    """log |S'|^2, accurate in both tails."""
    return -np.logaddexp(0.0, -np.asarray(s, dtype=float))


def _eta_series(y: np.ndarray, beta: float) -> np.ndarray:
    """Integral of ((1+u)^beta - 1)/u over [0, y] for 0 <= y <= 1/2."""
    k = np.arange(1, _SERIES_TERMS + 1, dtype=float)
    coeff = binom(beta, k) / k
    powers = y[:, None] ** k[None, :]
    return powers @ coeff


@lru_cache(maxsize=4)
def _legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return roots_legendre(order)


def _eta_panels(tau_lo: np.ndarray, tau_hi: np.ndarray, beta: float) -> np.ndarray:
    """Integral of (1+e^tau)^beta - 1 over [tau_lo, tau_hi], composite Gauss-Legendre."""
    length = tau_hi - tau_lo
    panels = max(1, int(math.ceil(float(np.max(length, initial=0.0)) / _PANEL_LENGTH)))
    nodes, weights = _legendre(_PANEL_ORDER)

    width = length / panels
    starts = tau_lo[:, None] + width[:, None] * np.arange(panels)[None, :]
    mid = starts + 0.5 * width[:, None]
    tau = mid[:, :, None] + 0.5 * width[:, None, None] * nodes[None, None, :]
    integrand = np.expm1(beta * np.log1p(np.exp(tau)))
    return 0.5 * width * np.einsum("ijk,k->i", integrand, weights)


def eta_epsilon(x, eps: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Regularized cone profile and its x-derivative.

    eta = beta * int_0^x ((r + eps^2)^beta - eps^(2 beta)) / r dr, and
    eta' = beta * ((x + eps^2)^beta - eps^(2 beta)) / x with the limit
    beta^2 eps^(2 beta - 2) at x = 0. eps = 0 returns the cone profile x^beta.

    Args:
        x: Nonnegative argument (scalar or array).
        eps: Regularization parameter, eps >= 0.
        beta: Cone angle parameter in (0, 1].

    Returns:
        Tuple of (value, derivative), arrays shaped like x.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("eta_epsilon is defined for x >= 0 only")
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")

    shape = x.shape
    x = np.atleast_1d(x).ravel()

    if beta == 1.0:
        return x.reshape(shape), np.ones_like(x).reshape(shape)

    if eps == 0.0:
        value = x**beta
        with np.errstate(divide="ignore"):
            deriv = np.where(x > 0.0, beta * x ** (beta - 1.0), np.inf)
        return value.reshape(shape), deriv.reshape(shape)

    eps2 = eps * eps
    scale = beta * eps2**beta
    y = x / eps2

    low = np.minimum(y, _SERIES_LIMIT)
    integral = _eta_series(low, beta)
    high = y > _SERIES_LIMIT
    if np.any(high):
        integral[high] += _eta_panels(
            np.full(int(high.sum()), math.log(_SERIES_LIMIT)), np.log(y[high]), beta
        )
    value = scale * integral

    with np.errstate(invalid="ignore", divide="ignore"):
        deriv = np.where(
            x > 0.0,
            scale * np.expm1(beta * np.log1p(y)) / np.where(x > 0.0, x, 1.0),
            beta * beta * eps2 ** (beta - 1.0),
        )
    return value.reshape(shape), deriv.reshape(shape)


def eta_profile(s, eps: float, beta: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """eta_eps(norm_S(s)) and its first two s-derivatives.

    With x = norm_S, x' = x(1-x) and g(x) = x * d(eta)/dx:
    d(eta)/ds = g (1-x) and d2(eta)/ds2 = x (1-x) (g'(x)(1-x) - g).
    """
    s = np.asarray(s, dtype=float)
    x = expit(s)
    one_minus_x = expit(-s)
    value, _ = eta_epsilon(x, eps, beta)

    if eps == 0.0:
        g = beta * x**beta
        g_prime_x = beta * beta * x**beta  # x * g'(x)
        first = g * one_minus_x
        second = one_minus_x * (g_prime_x * one_minus_x - x * g)
        return value, first, second

    eps2 = eps * eps
    g = beta * eps2**beta * np.expm1(beta * np.log1p(x / eps2))
    g_prime = beta * beta * (x + eps2) ** (beta - 1.0)
    first = g * one_minus_x
    second = x * one_minus_x * (g_prime * one_minus_x - g)
    return value, first, second


def cone_current(s, eps: float) -> np.ndarray:
    """Regularized divisor current: (log(norm_S + eps^2))'' + fs_density.

    A positive bump of total mass one concentrating at the cone point as
    eps -> 0; equal to x(1-x) eps^2 (1+eps^2) / (x + eps^2)^2.
    """
    s = np.asarray(s, dtype=float)
    x = expit(s)
    eps2 = eps * eps
    if eps == 0.0:
        return np.zeros_like(s)
    return x * expit(-s) * eps2 * (1.0 + eps2) / (x + eps2) ** 2


@dataclass(frozen=True)
class ClassData:
    """Cohomology bookkeeping of the model.

    Attributes:
        t_max: First time the evolving class leaves the Kahler cone.
        c_chi: Coefficient of chi = c_chi * FS, the semi-ample limit class.
        target: Base coefficient the reference class relaxes to.
        mode: "twisted" or "normalized".
    """

    a: float
    b: float
    beta: float
    t_max: float
    c_chi: float
    target: float
    mode: str = "twisted"

    def fiber_coefficient(self, t: float) -> float:
        """Fiber class coefficient A(t)."""
        if self.mode == "twisted":
            return self.a * math.exp(-t)
        return (self.a + 2.0) * math.exp(-t) - 2.0

    def base_coefficient(self, t: float) -> float:
        """Base class coefficient e^-t b + (1 - e^-t) target."""
        decay = math.exp(-t)
        return decay * self.b + (1.0 - decay) * self.target

    def twist(self) -> float:
        """Coefficient 1/T_max of the twisting form, zero when untwisted."""
        return 1.0 / self.t_max if self.mode == "twisted" else 0.0

    def fiber_log_term(self, t: float) -> float:
        """Spatially constant fiber contribution to the potential equation.

        Twisted mode: the e^t factor cancels the fiber factor a e^-t exactly.
        """
        if self.mode == "twisted":
            return 0.0
        return math.log(self.fiber_coefficient(t) / self.a)

    def trace_offset(self) -> float:
        """Constant c in d/dt phi_dot = -R~ - c - phi_dot for the reduced equation."""
        return 1.0 if self.mode == "twisted" else 2.0


def tmax_and_classes(a: float, b: float, beta: float) -> Tuple[float, float]:
    """T_max and the base coefficient of chi for the twisted model.

    The fiber P1 shrinks at T_max = a/2; chi = (2b/a - 1 - beta) FS solves
    the semi-ample relation.

    Raises:
        ClassDegeneracy: If a/2 >= b/(1+beta).
    """
    if a <= 0.0 or b <= 0.0:
        raise ValueError("a and b must be positive")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if a / 2.0 >= b / (1.0 + beta):
        raise ClassDegeneracy(
            f"base degenerates no later than the fiber "
            f"(a/2 = {a / 2.0:.6g} >= b/(1+beta) = {b / (1.0 + beta):.6g})"
        )
    c_chi = 2.0 * b / a - 1.0 - beta
    return a / 2.0, c_chi


def class_data(config: ModelConfig) -> ClassData:
    """Class bookkeeping for a configuration, in either flow mode."""
    t_max, c_chi = tmax_and_classes(config.a, config.b, config.beta)
    if config.mode == "twisted":
        return ClassData(config.a, config.b, config.beta, t_max, c_chi, c_chi, "twisted")

    fiber_end = math.log(1.0 + config.a / 2.0)
    base_end = math.log((config.b + 1.0 + config.beta) / (1.0 + config.beta))
    t_max_normalized = min(fiber_end, base_end)
    if config.t_end >= t_max_normalized:
        raise ClassDegeneracy(
            f"normalized flow reaches the cone boundary at "
            f"T = {t_max_normalized:.6g} before t_end = {config.t_end:.6g}"
        )
    return ClassData(
        config.a,
        config.b,
        config.beta,
        t_max_normalized,
        c_chi,
        -(1.0 + config.beta),
        "normalized",
    )


@dataclass(frozen=True)
class ReferenceBundle:
    """Reference densities of one regularization rung.

    Attributes:
        fs: The Fubini-Study density.
        omega0_base: b * FS, base part of the initial class.
        chi: c_chi * FS.
        chi_star: chi + delta * eta'' (model conical metric, regularized for eps > 0).
        omega0_star: b * FS + delta * eta'', base part of the initial metric.
        omega: Base volume density of Omega.
        weight: Regularized cone weight times Omega, the flow's volume density W.
        g_function: Omega / chi.
        cone_weight: (norm_S + eps^2)^-(1 - beta).
        eta, eta_s, eta_ss: Cone profile and its s-derivatives (without delta).
        log_weight: log of `weight`, kept exactly as assembled.
        current: Regularized divisor current.
    """

    grid: RadialGrid
    eps: float
    beta: float
    delta: float
    classes: ClassData
    fs: Density
    omega0_base: Density
    chi: Density
    chi_star: Density
    omega0_star: Density
    omega: Density
    weight: Density
    g_function: Density
    cone_weight: np.ndarray
    eta: np.ndarray
    eta_s: np.ndarray
    eta_ss: np.ndarray
    log_weight: np.ndarray
    log_norm: np.ndarray
    current: np.ndarray

    @property
    def left_lambda(self) -> float:
        """Tail exponent used by the boundary closure at s_min."""
        return self.chi_star.left_exponent

    def chi_t_values(self, t: float) -> np.ndarray:
        """Values of e^-t omega0_base + (1 - e^-t) target * FS."""
        decay = math.exp(-t)
        return decay * self.omega0_base.values + (1.0 - decay) * self.classes.target * self.fs.values

    def chi_t(self, t: float) -> Density:
        """Base reference form e^-t omega0_base + (1 - e^-t) target * FS."""
        coefficient = self.classes.base_coefficient(t)
        return Density(self.grid, self.chi_t_values(t), 1.0, 1.0, 1.0, name=f"chi_t(area {coefficient:.6g})")

    def reference_values(self, t: float) -> np.ndarray:
        """chi_t + delta * eta'', the metric density of the zero potential at time t."""
        return self.chi_t_values(t) + self.delta * self.eta_ss

    def base_area(self, t: float) -> float:
        """Area of the evolving base class from the mixing formula."""
        decay = math.exp(-t)
        return decay * self.omega0_base.area() + (1.0 - decay) * self.classes.target * self.fs.area()


def march_log_volume(grid: RadialGrid, rhs: np.ndarray, left_slope: float = 1.0) -> np.ndarray:
    """Integrate u'' = rhs from s_min with u(s_min) = 0 and slope left_slope.

    Marched with the three-point stencil used by the solvers, so the
    discrete relation D2 u = rhs holds at interior nodes to rounding.
    """
    h = grid.spacing
    u = np.empty(grid.n_nodes)
    u[0] = 0.0
    u[1] = left_slope * h + 0.5 * h * h * rhs[0]
    for i in range(1, grid.n_nodes - 1):
        u[i + 1] = 2.0 * u[i] - u[i - 1] + h * h * rhs[i]
    return u


def build_reference(config: ModelConfig, eps: float) -> ReferenceBundle:
    """Assemble every reference density of rung eps.

    Args:
        config: Validated model configuration.
        eps: Regularization parameter; 0 builds the conical model.

    Returns:
        ReferenceBundle: Immutable densities on the configured grid.

    Raises:
        ClassDegeneracy: From the class bookkeeping.
        PositivityLoss: If delta makes chi_star or the initial metric nonpositive.
    """
    classes = class_data(config)
    grid = RadialGrid.from_config(config.grid)
    s = grid.nodes
    beta, delta = config.beta, config.delta
    left = beta if eps == 0.0 else 1.0

    fs_values = fs_density(s)
    fs = Density(grid, fs_values, 1.0, 1.0, 1.0, name="fs")
    omega0_base = fs.scaled(config.b, name="omega0_base")
    chi = fs.scaled(classes.c_chi, name="chi")

    eta, eta_s, eta_ss = eta_profile(s, eps, beta)
    chi_star = Density(grid, chi.values + delta * eta_ss, left, 1.0, beta if eps == 0.0 else 1.0, "chi_star")
    chi_star.require_positive()
    omega0_star = Density(grid, omega0_base.values + delta * eta_ss, left, 1.0, chi_star.cone_angle, "omega0_star")
    omega0_star.require_positive()

    # (log rho_Omega)'' = chi - (2b/a) FS - (1 - beta) FS
    twist_coefficient = 2.0 * config.b / config.a
    rhs = chi.values - twist_coefficient * fs_values - (1.0 - beta) * fs_values
    log_omega = march_log_volume(grid, rhs)
    mass = trapezoid(np.exp(log_omega - log_omega.max()), s)
    log_omega += math.log(chi.area()) - math.log(mass) - log_omega.max()
    omega = Density(grid, np.exp(log_omega), 1.0, 1.0, 1.0, "omega")

    x = norm_S(s)
    log_cone = -(1.0 - beta) * np.log(x + eps * eps)
    cone_weight = np.exp(log_cone)
    log_weight = log_omega + log_cone
    weight = Density(grid, np.exp(log_weight), left, 1.0, chi_star.cone_angle, "weight")

    if config.constant_g is not None:
        g_values = np.full_like(s, config.constant_g)
        log_weight = np.log(config.constant_g) + np.log(chi.values) + log_cone
        weight = Density(grid, np.exp(log_weight), left, 1.0, chi_star.cone_angle, "weight")
    else:
        g_values = omega.values / chi.values
    g_function = Density(grid, g_values, 0.0, 0.0, 1.0, "G")

    bundle = ReferenceBundle(
        grid=grid,
        eps=eps,
        beta=beta,
        delta=delta,
        classes=classes,
        fs=fs,
        omega0_base=omega0_base,
        chi=chi,
        chi_star=chi_star,
        omega0_star=omega0_star,
        omega=omega,
        weight=weight,
        g_function=g_function,
        cone_weight=cone_weight,
        eta=eta,
        eta_s=eta_s,
        eta_ss=eta_ss,
        log_weight=log_weight,
        log_norm=log_norm_S(s),
        current=cone_current(s, eps),
    )
    logger.debug(
        f"Built references for eps={eps:g}: area(chi)={chi.area():.6g}, "
        f"G in [{g_values.min():.6g}, {g_values.max():.6g}]"
    )
    return bundle


def equivalence_band(refs: ReferenceBundle) -> Tuple[float, float]:
    """Range of chi_star / chi over the grid."""
    ratio = refs.chi_star.values / refs.chi.values
    return float(ratio.min()), float(ratio.max())


def delta_sweep(
    config: ModelConfig, deltas: Iterable[float], eps: float = 0.0
) -> List[Tuple[float, float, float, bool]]:
    """Check chi_star within [chi/2, 2 chi] across a sweep of delta.

    Returns:
        List of (delta, min ratio, max ratio, within band) per delta;
        nonpositive chi_star is reported as a failed band.
    """
    rows = []
    for delta in deltas:
        try:
            refs = build_reference(config.with_updates(delta=delta), eps)
        except PositivityLoss:
            rows.append((delta, float("nan"), float("nan"), False))
            continue
        lo, hi = equivalence_band(refs)
        rows.append((delta, lo, hi, lo >= 0.5 and hi <= 2.0))
    return rows


def admissible_delta(config: ModelConfig, eps: float = 0.0) -> Optional[float]:
    """Largest delta on the lambda0-scaled sweep keeping chi_star within [chi/2, 2 chi]."""
    deltas = [config.lambda0 * 2.0 ** (-k) for k in range(12)]
    admissible = [d for d, _, _, ok in delta_sweep(config, deltas, eps) if ok]
    return max(admissible) if admissible else None


# Discrete operators
#
# Potentials are carried as an anchor value plus first differences. In the
# exponential tails the curvature of a potential is of the size of the
# density itself (~1e-13 at |s| = 30), far below the rounding of O(1)
# node values, so second differences are always taken from increments.


def closure_coefficient(exponent: float, spacing: float) -> float:
    """Boundary row weight, exact for tails A + B*exp(exponent * s)."""
    return exponent * exponent / math.expm1(exponent * spacing)


def values_from_increments(anchor: float, increments: np.ndarray) -> np.ndarray:
    """Node values from the left anchor and the first differences."""
    values = np.empty(increments.size + 1)
    values[0] = anchor
    np.cumsum(increments, out=values[1:])
    values[1:] += anchor
    return values


def second_difference(
    increments: np.ndarray, spacing: float, left_exponent: float, right_exponent: float
) -> np.ndarray:
    """Three-point second difference with exponent-matched boundary rows.

    Args:
        increments: First differences of the potential (n - 1 entries).
        spacing: Grid spacing h.
        left_exponent: Tail exponent closing the row at s_min.
        right_exponent: Tail exponent closing the row at s_max.

    Returns:
        Array of n second differences.
    """
    n = increments.size + 1
    out = np.empty(n)
    out[1 : n - 1] = (increments[1:] - increments[:-1]) / (spacing * spacing)
    out[0] = closure_coefficient(left_exponent, spacing) * increments[0]
    out[n - 1] = -closure_coefficient(right_exponent, spacing) * increments[-1]
    return out


def second_difference_bands(
    n_nodes: int, spacing: float, left_exponent: float, right_exponent: float
) -> np.ndarray:
    """Banded (1, 1) storage of the matrix applied by `second_difference`.

    Row 0 holds the super-diagonal, row 1 the diagonal and row 2 the
    sub-diagonal, the layout expected by scipy.linalg.solve_banded.
    """
    inv_h2 = 1.0 / (spacing * spacing)
    bands = np.zeros((3, n_nodes))
    bands[0, 1:] = inv_h2
    bands[1, :] = -2.0 * inv_h2
    bands[2, :-1] = inv_h2

    c_left = closure_coefficient(left_exponent, spacing)
    c_right = closure_coefficient(right_exponent, spacing)
    bands[1, 0] = -c_left
    bands[0, 1] = c_left
    bands[1, -1] = -c_right
    bands[2, -2] = c_right
    return bands


_CENTERED_STENCILS = {
    2: np.array([1.0, -2.0, 1.0]),
    4: np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0,
    6: np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0,
}


def centered_second_difference(values: np.ndarray, spacing: float, order: int = 2) -> np.ndarray:
    """Centered second difference of the given order; NaN where the stencil does not fit."""
    if order not in _CENTERED_STENCILS:
        raise ValueError(f"unsupported difference order {order}")
    stencil = _CENTERED_STENCILS[order]
    half = stencil.size // 2
    out = np.full(values.shape, np.nan)
    out[half : values.size - half] = np.correlate(values, stencil, mode="valid") / (spacing * spacing)
    return out


def centered_first_difference(values: np.ndarray, spacing: float) -> np.ndarray:
    """Centered first difference; NaN at the two end nodes."""
    out = np.full(values.shape, np.nan)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * spacing)
    return out
