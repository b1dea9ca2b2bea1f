"""Tests for meridian distances, the shortest-path oracle and collapse monitors."""

import math

import numpy as np
import pytest

from chart_geometry import Density, RadialGrid, fs_density
from config import MetricConfig
from error_handling import UnresolvedRegion
from limit_ma import solve_limit
from metric_space import (
    FS_DIAMETER,
    base_diameter,
    build_surface_metric,
    dijkstra_oracle,
    fiber_circumference,
    fiber_diameter,
    gh_upper_bound,
    graph_diameter,
    lemma_threshold,
    metrication_gap,
    neighborhood_diameter,
    pole_to_pole,
    radial_distance,
    radial_profile,
    total_diameter,
)


@pytest.fixture
def fs():
    grid = RadialGrid(-30.0, 30.0, 2049)
    return Density(grid, fs_density(grid.nodes), name="fs")


def test_fubini_study_diameter(fs):
    assert pole_to_pole(fs) == pytest.approx(FS_DIAMETER, rel=1e-7)


def test_radial_distance_to_equator_is_half(fs):
    assert radial_distance(fs, -math.inf, 0.0) == pytest.approx(0.5 * FS_DIAMETER, rel=1e-7)
    assert radial_distance(fs, -1.0, 1.0) == pytest.approx(
        radial_distance(fs, -math.inf, 1.0) - radial_distance(fs, -math.inf, -1.0)
    )


def test_radial_distance_rejects_reversed_interval(fs):
    with pytest.raises(ValueError):
        radial_distance(fs, 1.0, -1.0)


def test_radial_profile_is_increasing(fs):
    profile = radial_profile(fs)
    assert np.all(np.diff(profile) > 0.0)
    assert profile[-1] < pole_to_pole(fs)


def test_surface_metric_cells_are_square(fs):
    metric = build_surface_metric(fs, 41, -10.0, 10.0)
    ds = metric.s[1] - metric.s[0]
    assert metric.n_theta == round(4.0 * math.pi / ds)
    assert metric.tip is None and metric.pole is None


def test_graph_distance_along_meridian_is_exact(fs):
    """Tip to pole along the meridian is a sum of exact segment lengths."""
    metric = build_surface_metric(fs, 64)
    distances = dijkstra_oracle(metric, metric.tip)
    assert distances[metric.pole] == pytest.approx(pole_to_pole(fs), rel=1e-10)


def test_metrication_gap_within_envelope(config, fs):
    """The 8-neighbour graph distorts the FS sphere by less than the known 8.24%."""
    gap = metrication_gap(fs, config)
    assert gap <= config.metric.metrication_tol


def test_graph_diameter_bounds_meridian(fs):
    metric = build_surface_metric(fs, 48)
    assert graph_diameter(metric) >= pole_to_pole(fs) * (1.0 - 1e-10)


def test_fiber_diameter_decays_at_half_rate(config):
    ratio = fiber_diameter(2.0, config) / fiber_diameter(0.0, config)
    assert ratio == pytest.approx(math.exp(-1.0))
    assert fiber_diameter(0.0, config) == pytest.approx(math.sqrt(config.a) * FS_DIAMETER)


def test_fiber_circumference_scales_with_fiber(config, refs):
    """Graph lengths of the fiber equator scale exactly like sqrt(A(t))."""
    c0 = fiber_circumference(0.0, config, refs)
    c1 = fiber_circumference(1.0, config, refs)
    assert c1 / c0 == pytest.approx(math.exp(-0.5), rel=1e-10)
    # Equator of the round fiber of area a: 2 pi sqrt(a/2) for the FS line element.
    assert c0 == pytest.approx(2.0 * math.pi * math.sqrt(config.a / 2.0), rel=config.metric.metrication_tol)


def test_lemma_threshold_matches_fiber_size(config):
    eps_gh = 0.1
    threshold = lemma_threshold(eps_gh, config)
    assert fiber_diameter(threshold, config) == pytest.approx(eps_gh)


def test_neighborhood_diameter_unresolved_ball(config, refs):
    with pytest.raises(UnresolvedRegion):
        neighborhood_diameter(refs.omega0_star, 0.0, refs, config, 1e-4)


def test_neighborhood_diameter_exceeds_fiber(config, refs):
    value = neighborhood_diameter(refs.omega0_star, 0.0, refs, config, 0.2)
    assert value > fiber_diameter(0.0, config)


def test_gh_bound_of_limit_against_itself_is_fiber(config, refs):
    chibar = solve_limit(refs, config).chibar_density
    assert gh_upper_bound(chibar, 3.0, chibar, config) == pytest.approx(fiber_diameter(3.0, config))
    oracle = gh_upper_bound(chibar, 3.0, chibar, config, oracle=True)
    assert oracle == pytest.approx(fiber_diameter(3.0, config))


def test_base_diameter_of_whole_surface_is_meridian(fs):
    assert base_diameter(fs) == pole_to_pole(fs)


def test_base_diameter_of_band_covers_its_meridian(fs):
    """A band's graph diameter is at least the meridian segment it spans."""
    band = base_diameter(fs, (-2.0, 2.0), MetricConfig(mesh_rings=32))
    assert band >= radial_distance(fs, -2.0, 2.0) * (1.0 - 1e-6)


def test_total_diameter_combines_factors(config, fs):
    assert total_diameter(fs, 1.0, config) == pytest.approx(math.hypot(fiber_diameter(1.0, config), FS_DIAMETER), rel=1e-7)
