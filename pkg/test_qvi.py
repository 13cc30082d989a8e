#!/usr/bin/env python3
"""
Tests for the QVI grid solver, its residual and the value-function checks
"""
import sys
from dataclasses import replace

import numpy as np
import pytest

from errors import ConfigError
from model import ImpulseControl, cone_grid, scale_costs, scale_impulse_cost
from presets import heat_kernel, heat_kernel_value, impulse_active
from qvi import (
    check_dpp,
    check_no_double_impulse,
    check_regularity,
    check_semiconvexity,
    extract_deterministic_control,
    intervention_operator,
    make_solve_grid,
    max_error_vs_oracle,
    qvi_residual,
    refine_control,
    sample_continuation_points,
    semiconvexity_constant,
    solve_qvi,
)
from simulate import estimate_cost, evaluate_policy


@pytest.fixture(scope="module")
def heat_solution():
    spec = heat_kernel()
    grid = make_solve_grid(spec, nx=64, nt=64, tau_values=[0.0])
    return spec, solve_qvi(spec, grid)


@pytest.fixture(scope="module")
def active_solution():
    spec = impulse_active()
    grid = make_solve_grid(spec, nx=48, nt=40, x_min=-4.0, x_max=8.0, tau_values=[0.0])
    return spec, grid, solve_qvi(spec, grid)


def test_heat_kernel_matches_closed_form(heat_solution):
    spec, (vf, policy) = heat_solution
    assert max_error_vs_oracle(vf, heat_kernel_value) <= 2e-2
    assert policy.region_size == 0


def test_heat_kernel_residual_is_small(heat_solution):
    spec, (vf, _) = heat_solution
    report = qvi_residual(vf, spec)
    assert report.p99_abs <= 5e-2
    assert report.field.shape[1] == len(vf.grid.t_nodes) - 1


def test_value_within_bounds(active_solution):
    spec, _, (vf, _) = active_solution
    assert np.all(vf.values >= -1e-12)
    assert np.all(vf.values <= vf.bound(spec) + 1e-9)
    assert np.all(vf.values <= vf.obstacle + 1e-9)


def test_impulses_are_used_where_running_cost_is_high(active_solution):
    _, _, (vf, policy) = active_solution
    assert policy.region_size > 0
    report = check_no_double_impulse(policy, vf)
    assert report.checked == policy.region_size


def test_scaling_costs_scales_the_value(active_solution):
    spec, grid, (vf, policy) = active_solution
    vf2, policy2 = solve_qvi(scale_costs(spec, 2.0), grid)
    np.testing.assert_allclose(vf2.values, 2.0 * vf.values, rtol=1e-12, atol=0.0)
    np.testing.assert_array_equal(policy2.intervene, policy.intervene)


def test_cheaper_impulses_never_raise_the_value(active_solution):
    spec, grid, (vf, _) = active_solution
    cheaper, _ = solve_qvi(scale_impulse_cost(spec, 0.5), grid)
    assert np.all(cheaper.values <= vf.values + 1e-6)


def test_solve_grid_always_holds_tau0():
    spec = impulse_active()
    grid = make_solve_grid(spec, nx=40, nt=40, tau_values=[0.2, 0.6])
    assert list(grid.tau_values) == [0.0, 0.2, 0.6]
    assert not grid.valid()[1, 0]
    assert grid.valid()[1, -1]
    with pytest.raises(ConfigError):
        make_solve_grid(spec, nx=10, nt=40)
    with pytest.raises(ConfigError):
        make_solve_grid(spec, nx=40, nt=40, tau_values=[1.5])


def test_semiconvexity_constant_of_parabolas():
    x = np.linspace(-2.0, 2.0, 81)
    dx = x[1] - x[0]
    assert semiconvexity_constant(x * x, dx) == pytest.approx(1.0, rel=1e-6)
    assert semiconvexity_constant(-(x * x), dx) == pytest.approx(0.0, abs=1e-9)


def test_extracted_control_is_admissible(active_solution):
    spec, _, (_, policy) = active_solution
    evaluation = evaluate_policy(spec, policy, [0.0], paths=200, base_steps=39, seed=4)
    control = extract_deterministic_control(evaluation, spec)
    assert list(control.times) == sorted(control.times)
    assert all(s[0] >= 0.0 for s in control.sizes)
    assert sum(evaluation.kappa_distribution.values()) == 200


def test_refine_without_impulses_keeps_the_control():
    spec = impulse_active()
    empty = ImpulseControl(start_time=0.0)
    control, cost = refine_control(spec, empty, [0.0], paths=100, base_steps=16, seed=1)
    assert control == empty
    assert cost.path_count == 100


def test_heat_kernel_error_shrinks_under_refinement():
    spec = heat_kernel()
    errors = []
    for n in (33, 65):
        vf, _ = solve_qvi(spec, make_solve_grid(spec, nx=n, nt=n, tau_values=[0.0]))
        errors.append(max_error_vs_oracle(vf, heat_kernel_value))
    assert errors[1] > 0.0
    assert errors[0] / errors[1] >= 1.5


def test_residual_flags_a_perturbed_node(heat_solution):
    spec, (vf, _) = heat_solution
    before = qvi_residual(vf, spec)
    bumped = replace(vf, values=vf.values.copy())
    j, i = len(vf.grid.t_nodes) // 2, len(vf.grid.x_nodes) // 2
    bumped.values[0, j, i] += 0.1
    after = qvi_residual(bumped, spec)
    step = vf.grid.t_nodes[j + 1] - vf.grid.t_nodes[j]
    assert after.max_abs >= 0.1 / step - before.max_abs
    assert after.sub_violation > before.sub_violation


def test_intervention_on_a_constant_value_keeps_the_state():
    spec = heat_kernel()
    x = np.linspace(-1.0, 1.0, 11)
    xi_grid = cone_grid(spec.cone, 6)
    N, best = intervention_operator(np.full(x.size, 2.5), 0.4, spec, xi_grid, x)
    np.testing.assert_allclose(N, 2.5 + 3.0)
    assert np.all(best == 0)
    assert xi_grid[0, 0] == 0.0


def test_heat_kernel_semiconvexity_is_within_half(heat_solution):
    _, (vf, _) = heat_solution
    report = check_semiconvexity(vf, 0.5, slack=1e-6)
    assert 0.3 < report.k_required <= 0.5 + 1e-6
    assert report.feasible is True
    assert check_semiconvexity(vf).feasible is None
    assert check_semiconvexity(vf, 0.1).feasible is False


def test_heat_kernel_regularity(heat_solution):
    spec, (vf, _) = heat_solution
    report = check_regularity(vf, spec)
    assert report.passed
    assert report.lower >= -1e-9
    assert report.upper <= 2.0 + 1e-9
    assert np.isfinite(report.holder_t) and np.isfinite(report.lipschitz_x)
    assert report.tau_variation == 0.0
    assert report.tau_allowance is None


def test_heat_kernel_satisfies_dynamic_programming(heat_solution):
    spec, (vf, _) = heat_solution
    points = sample_continuation_points(vf, 10, seed=5, delta=0.1)
    assert len(points) == 10
    report = check_dpp(spec, vf, points, delta=0.1, paths=4000, seed=5)
    assert report.passed
    assert all(row["equality_ok"] is True for row in report.rows)


def test_empty_policy_costs_the_same_as_no_impulses(heat_solution):
    spec, (_, policy) = heat_solution
    assert policy.region_size == 0
    evaluation = evaluate_policy(spec, policy, [0.3], paths=200, base_steps=16, seed=9)
    direct = estimate_cost(spec, ImpulseControl(start_time=0.0), [0.3], paths=200, base_steps=16, seed=9)
    assert evaluation.cost.mean == direct.mean
    assert evaluation.kappa_distribution == {0: 200}


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
