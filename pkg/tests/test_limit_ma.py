"""Tests for the elliptic limit equation and its Kahler-Einstein identity."""

import math

import numpy as np
import pytest

from chart_geometry import build_reference
from error_handling import ConfigValidationError, NonpositiveArgument
from limit_ma import (
    limit_residual,
    load_limit,
    save_limit,
    smooth_guess,
    solve_limit,
    solve_limit_ladder,
    uniqueness_probe,
    verify_gke,
)

from conftest import small_config


def test_constant_g_gives_constant_potential():
    """beta = 1 and G constant: psi = -log G everywhere."""
    config = small_config(beta=1.0, constant_g=2.0)
    refs = build_reference(config, 0.1)
    sol = solve_limit(refs, config)
    np.testing.assert_allclose(sol.psi, -math.log(2.0), atol=1e-9)
    np.testing.assert_allclose(sol.chibar_density.values, refs.chi.values, rtol=1e-9)


def test_solve_limit_converges(config, refs):
    sol = solve_limit(refs, config)
    assert sol.residual_norm < config.limit_tol
    residual = limit_residual(sol.anchor, sol.increments, refs)
    assert np.max(np.abs(residual)) < config.limit_tol
    assert np.all(sol.chibar_density.values > 0.0)


def test_limit_residual_rejects_nonpositive_density(refs):
    increments = -np.cumsum(np.ones(refs.grid.n_nodes - 1)) * refs.grid.spacing**2 * 50.0
    with pytest.raises(NonpositiveArgument):
        limit_residual(0.0, increments, refs)


def test_limit_has_chi_area(config, refs):
    """chibar lies in the class of chi: the potential does not change the area."""
    sol = solve_limit(refs, config)
    assert sol.chibar_density.area() == pytest.approx(refs.chi.area(), rel=1e-6)


def test_gke_residual_is_small_away_from_cone(config, refs):
    sol = solve_limit(refs, config)
    report = verify_gke(sol, refs, config)
    assert report.sup < 1e-2
    assert report.s_lo >= 2.0 * math.log(0.1) + config.cone_exclusion - refs.grid.spacing
    assert report.s_hi <= config.gke_window
    outside = (refs.grid.nodes < report.s_lo) | (refs.grid.nodes > report.s_hi)
    assert np.all(np.isnan(report.residual[outside]))


def test_random_starts_reach_the_same_solution(config, refs):
    reference = solve_limit(refs, config)
    spread = uniqueness_probe(refs, config, n_guesses=3, seed=7, reference=reference)
    assert spread < 1e-8


def test_smooth_guess_is_admissible(config, refs):
    """Starting guesses keep rho_chi + psi'' positive."""
    rng = np.random.default_rng(0)
    for _ in range(10):
        guess = smooth_guess(refs, rng)
        limit_residual(guess[0], np.diff(guess), refs)


def test_ladder_reports_cauchy_differences():
    config = small_config(epsilon_ladder=[0.2, 0.1, 0.05])
    ladder = solve_limit_ladder(config)
    assert sorted(ladder.solutions, reverse=True) == [0.2, 0.1, 0.05]
    assert len(ladder.cauchy) == 2
    assert all(c > 0.0 for c in ladder.cauchy)
    assert ladder.monotone


def test_save_and_load_limit(config, refs, tmp_path):
    sol = solve_limit(refs, config)
    path = tmp_path / "limit" / "eps_0.1.npz"
    save_limit(path, sol, config)

    loaded = load_limit(path, config, refs)
    np.testing.assert_array_equal(loaded.psi, sol.psi)
    np.testing.assert_array_equal(loaded.chibar_density.values, sol.chibar_density.values)
    assert loaded.eps == 0.1

    with pytest.raises(ConfigValidationError):
        load_limit(path, config.with_updates(delta=0.05), refs)
