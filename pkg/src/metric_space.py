"""Distances, diameters and collapse monitors of the evolving product metric.

Line element of a base density rho: ds^2 = (rho/2) ds_s^2 + 2 rho dtheta^2,
which is conformal in (s, 2 theta). With it the Fubini-Study sphere has
area 2 pi and pole-to-pole distance pi / sqrt(2). The total space is the
Riemannian product of the base with a round fiber, so product distances
are sqrt(d_fiber^2 + d_base^2) and the 4-dimensional space is never meshed.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra

from chart_geometry import Density, ReferenceBundle, class_data
from config import MetricConfig, ModelConfig
from error_handling import UnresolvedRegion

logger = logging.getLogger(__name__)

# Pole-to-pole distance of the Fubini-Study sphere with Ric = 2 FS.
FS_DIAMETER = math.pi / math.sqrt(2.0)
# Fewest grid nodes a base ball must contain to be resolved.
MIN_BALL_NODES = 8


def line_density(values: np.ndarray) -> np.ndarray:
    """Meridian line density sqrt(rho/2)."""
    return np.sqrt(0.5 * values)


def _tail_lengths(rho: Density) -> Tuple[float, float]:
    """Analytic meridian lengths beyond s_min (to the tip) and beyond s_max (to the pole)."""
    line = line_density(rho.values)
    left = 2.0 * line[0] / rho.left_exponent
    right = 2.0 * line[-1] / rho.right_exponent
    return float(left), float(right)


def _meridian_primitive(rho: Density):
    """Antiderivative of the interpolated line density over the grid."""
    return CubicSpline(rho.grid.nodes, line_density(rho.values)).antiderivative()


def radial_profile(rho: Density) -> np.ndarray:
    """Meridian distance from the tip (s = -inf) to every grid node."""
    primitive = _meridian_primitive(rho)
    left, _ = _tail_lengths(rho)
    nodes = rho.grid.nodes
    return left + primitive(nodes) - primitive(nodes[0])


def radial_distance(rho: Density, s1: float, s2: float) -> float:
    """Meridian distance between parallels s1 <= s2.

    s1 = -inf is the tip and s2 = +inf the opposite pole; beyond the grid the
    density follows its declared tails exactly.
    """
    if s1 > s2:
        raise ValueError("radial_distance expects s1 <= s2")
    nodes = rho.grid.nodes
    left, right = _tail_lengths(rho)
    primitive = _meridian_primitive(rho)

    def position(s: float) -> float:
        if s == -math.inf:
            return float(primitive(nodes[0])) - left
        if s == math.inf:
            return float(primitive(nodes[-1])) + right
        if not nodes[0] <= s <= nodes[-1]:
            raise ValueError(f"s={s} outside the grid")
        return float(primitive(s))

    return position(s2) - position(s1)


def pole_to_pole(rho: Density) -> float:
    """Length of a full meridian, the diameter of the surface of revolution."""
    return radial_distance(rho, -math.inf, math.inf)


@dataclass(frozen=True)
class SurfaceMetric2D:
    """8-neighbour weighted graph of a rotationally symmetric metric.

    Nodes are (ring, angle) pairs stored ring-major, optionally followed by
    the tip node and the pole node. Rings are uniform in s and angles
    uniform in theta with n_theta = 4 pi / ds, so cells are metrically square.
    """

    s: np.ndarray
    n_theta: int
    line: np.ndarray
    graph: csr_matrix = field(repr=False)
    tip: Optional[int] = None
    pole: Optional[int] = None

    @property
    def n_rings(self) -> int:
        return self.s.size

    @property
    def n_nodes(self) -> int:
        return self.graph.shape[0]

    def node(self, ring: int, angle: int) -> int:
        """Graph index of the node on `ring` at angle index `angle`."""
        return ring * self.n_theta + angle % self.n_theta

    def meridian(self) -> np.ndarray:
        """Indices of the theta = 0 nodes, tip to pole."""
        return np.arange(self.n_rings) * self.n_theta


def build_surface_metric(
    rho: Density,
    rings: int,
    s_lo: Optional[float] = None,
    s_hi: Optional[float] = None,
    n_theta: Optional[int] = None,
) -> SurfaceMetric2D:
    """Assemble the shortest-path graph of rho over [s_lo, s_hi].

    The tip (pole) node is attached when the mesh starts (ends) at the grid
    boundary, with the analytic tail length as edge weight.
    """
    nodes = rho.grid.nodes
    s_lo = nodes[0] if s_lo is None else max(s_lo, nodes[0])
    s_hi = nodes[-1] if s_hi is None else min(s_hi, nodes[-1])
    if rings < 2 or not s_lo < s_hi:
        raise ValueError("a surface mesh needs two rings and a nonempty interval")

    s = np.linspace(s_lo, s_hi, rings)
    ds = s[1] - s[0]
    if n_theta is None:
        n_theta = max(8, int(round(4.0 * math.pi / ds)))
    dtheta = 2.0 * math.pi / n_theta

    primitive = _meridian_primitive(rho)
    log_rho = CubicSpline(nodes, np.log(rho.values))
    line = line_density(np.exp(log_rho(s)))
    meridian = np.diff(primitive(s))
    # Parallel edge at the ring midpoint: the circle line element is sqrt(2 rho) = 2 * line.
    parallel = 2.0 * line * dtheta
    parallel_mid = 0.5 * (parallel[:-1] + parallel[1:])
    diagonal = np.hypot(meridian, parallel_mid)

    ring = np.arange(rings)[:, None]
    angle = np.arange(n_theta)[None, :]
    index = ring * n_theta + angle
    right = ring * n_theta + (angle + 1) % n_theta

    rows = [index.ravel()]
    cols = [right.ravel()]
    weights = [np.repeat(parallel, n_theta)]

    lower = index[:-1]
    upper = index[1:]
    upper_right = ring[1:] * n_theta + (angle + 1) % n_theta
    upper_left = ring[1:] * n_theta + (angle - 1) % n_theta
    for target, w in ((upper, meridian), (upper_right, diagonal), (upper_left, diagonal)):
        rows.append(lower.ravel())
        cols.append(target.ravel())
        weights.append(np.repeat(w, n_theta))

    n = rings * n_theta
    tip = pole = None
    left_tail, right_tail = _tail_lengths(rho)
    if s_lo <= nodes[0]:
        tip = n
        n += 1
        rows.append(np.full(n_theta, tip))
        cols.append(index[0])
        weights.append(np.full(n_theta, left_tail))
    if s_hi >= nodes[-1]:
        pole = n
        n += 1
        rows.append(np.full(n_theta, pole))
        cols.append(index[-1])
        weights.append(np.full(n_theta, right_tail))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0.0):
        raise ValueError("surface metric produced a nonpositive or infinite edge")
    graph = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    return SurfaceMetric2D(s=s, n_theta=n_theta, line=line, graph=graph, tip=tip, pole=pole)


def dijkstra_oracle(metric: SurfaceMetric2D, source) -> np.ndarray:
    """Single- or multi-source shortest-path distances on the undirected graph."""
    return dijkstra(metric.graph, directed=False, indices=source)


def graph_diameter(metric: SurfaceMetric2D, sources: Optional[Sequence[int]] = None) -> float:
    """Largest graph distance from the given sources (default: the theta = 0 meridian and the poles).

    Rotational symmetry makes a single meridian of sources enough.
    """
    if sources is None:
        sources = list(metric.meridian())
        sources += [p for p in (metric.tip, metric.pole) if p is not None]
    fields = dijkstra_oracle(metric, list(sources))
    return float(np.max(fields))


def base_diameter(
    rho: Density,
    region: Optional[Tuple[float, float]] = None,
    metric_config: Optional[MetricConfig] = None,
) -> float:
    """Diameter of the base over `region` (whole surface if None).

    The whole surface of revolution has diameter equal to its meridian
    length: for any two points the two routes through the poles sum to twice
    that length. A proper region is measured on the shortest-path graph.
    """
    if region is None:
        return pole_to_pole(rho)
    metric_config = metric_config or MetricConfig()
    metric = build_surface_metric(rho, metric_config.mesh_rings, region[0], region[1], metric_config.n_theta)
    return graph_diameter(metric)


def fiber_diameter(t: float, config: ModelConfig) -> float:
    """Diameter sqrt(A(t)) * diam(FS) of the round fiber, e^-t/2 sqrt(a) diam(FS) when twisted."""
    classes = class_data(config)
    return math.sqrt(classes.fiber_coefficient(t)) * FS_DIAMETER


def fiber_circumference(t: float, config: ModelConfig, refs: ReferenceBundle) -> float:
    """Equator length of the fiber measured on the shortest-path graph.

    Twice the graph distance between antipodal points of the equator
    parallel; the fiber metric is the same over every base point.
    """
    classes = class_data(config)
    fiber = refs.fs.scaled(classes.fiber_coefficient(t), name="fiber")
    rings = config.metric.mesh_rings | 1
    half = max(config.grid.s_max, -config.grid.s_min)
    metric = build_surface_metric(fiber, rings, -half, half)
    n_theta = metric.n_theta - metric.n_theta % 2
    if n_theta != metric.n_theta:
        metric = build_surface_metric(fiber, rings, -half, half, n_theta=n_theta)
    equator = rings // 2
    distances = dijkstra_oracle(metric, metric.node(equator, 0))
    return 2.0 * float(distances[metric.node(equator, n_theta // 2)])


def total_diameter(rho_base: Density, t: float, config: ModelConfig) -> float:
    """Diameter of the product: sqrt(fiber^2 + base^2)."""
    return math.hypot(fiber_diameter(t, config), pole_to_pole(rho_base))


def ball_edge(refs: ReferenceBundle, radius: float) -> float:
    """Parallel s bounding the chi-ball of the given radius around the cone point."""
    profile = radial_profile(refs.chi)
    if radius <= profile[0]:
        return float("-inf")
    if radius >= profile[-1]:
        return float(refs.grid.nodes[-1])
    return float(np.interp(radius, profile, refs.grid.nodes))


def neighborhood_diameter(
    omega: Density,
    t: float,
    refs: ReferenceBundle,
    config: ModelConfig,
    eps_gh: float,
    power: Optional[int] = None,
) -> float:
    """Diameter in d_t of the tube over the chi-ball of radius eps_gh^L around the cone point.

    The cap is measured on the shortest-path graph from the tip and from a
    boundary node; the fiber enters through the product formula.

    Raises:
        UnresolvedRegion: If the ball holds fewer than 8 grid nodes.
    """
    power = power or config.metric.gh_power
    radius = eps_gh**power
    edge = ball_edge(refs, radius)
    inside = int(np.count_nonzero(refs.grid.nodes <= edge))
    if inside < MIN_BALL_NODES:
        raise UnresolvedRegion(
            f"chi-ball of radius {radius:.3e} holds {inside} grid nodes (< {MIN_BALL_NODES})"
        )
    cap = build_surface_metric(omega, config.metric.cap_rings, refs.grid.nodes[0], edge)
    boundary = cap.node(cap.n_rings - 1, 0)
    cap_diameter = graph_diameter(cap, [cap.tip, boundary])
    return math.hypot(fiber_diameter(t, config), cap_diameter)


def lemma_threshold(eps_gh: float, config: ModelConfig) -> float:
    """Time after which the fiber is shorter than eps_gh: 2 log(fiber_diameter(0) / eps_gh)."""
    return 2.0 * math.log(fiber_diameter(0.0, config) / eps_gh)


def meridian_gh_term(omega: Density, chibar: Density) -> float:
    """sup over pairs of points on one meridian of |d_t - d_bar|.

    On a common meridian distances are differences of the radial profiles.
    """
    gap = radial_profile(omega) - radial_profile(chibar)
    pole_gap = pole_to_pole(omega) - pole_to_pole(chibar)
    values = np.concatenate([gap, [0.0, pole_gap]])
    return float(np.max(values) - np.min(values))


def gh_upper_bound(
    omega: Density,
    t: float,
    chibar: Density,
    config: ModelConfig,
    oracle: bool = False,
) -> float:
    """Projection-correspondence bound on d_GH((X, d_t), (Y, d_bar)).

    fiber_diameter(t) plus the largest base distance distortion; sampled
    along one meridian, or with oracle=True over shortest-path fields from
    gh_pairs meridian sources and both poles to every mesh node.
    """
    fiber = fiber_diameter(t, config)
    if not oracle:
        return fiber + meridian_gh_term(omega, chibar)

    rings = config.metric.mesh_rings
    evolving = build_surface_metric(omega, rings, n_theta=config.metric.n_theta)
    limit = build_surface_metric(chibar, rings, n_theta=evolving.n_theta)
    picks = np.unique(np.linspace(0, rings - 1, config.metric.gh_pairs).round().astype(int))
    sources = [evolving.node(r, 0) for r in picks] + [evolving.tip, evolving.pole]
    distortion = np.max(np.abs(dijkstra_oracle(evolving, sources) - dijkstra_oracle(limit, sources)))
    return fiber + float(distortion)


def metrication_gap(rho: Density, config: ModelConfig) -> float:
    """Relative gap between the graph diameter and the exact meridian length."""
    metric = build_surface_metric(rho, config.metric.mesh_rings, n_theta=config.metric.n_theta)
    graph = graph_diameter(metric)
    exact = pole_to_pole(rho)
    return abs(graph - exact) / exact
