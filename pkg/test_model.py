#!/usr/bin/env python3
"""
Tests for coefficient families, impulse costs, cones, controls and assumption checks
"""
import sys
from dataclasses import replace

import numpy as np
import pytest

from errors import ConeViolationError, ConfigError, DimensionMismatchError, ImpulseOrderError, InvalidCoefficientError, SimultaneousImpulsesError
from model import (
    CoefficientFamily,
    ConeSpec,
    ImpulseCost,
    TauFactor,
    cone_contains,
    cone_grid,
    derivative_errors,
    impulse_derivative_errors,
    normalize_control,
    scale_costs,
    validate_problem,
)
from presets import CATALOG, HALF_LINE, get_preset, heat_kernel, impulse_active

QUADRANT = ConeSpec(dimension=2, generators=((1.0, 0.0), (0.0, 1.0)), size_cap=2.0)


def test_tau_factor_forms():
    affine = TauFactor("affine", (0.1, -0.02))
    assert affine.value(2.0) == pytest.approx(0.06)
    assert affine.derivative(0.7) == pytest.approx(-0.02)
    trig = TauFactor("bounded-trig", (1.0, 0.5, 2.0))
    assert trig.value(0.3) == pytest.approx(1.0 + 0.5 * np.sin(0.6))
    assert trig.derivative(0.3) == pytest.approx(1.0 * np.cos(0.6))
    assert TauFactor().is_constant
    assert TauFactor("affine", (2.0, 0.0)).is_constant


def test_tau_factor_rejects_bad_params():
    with pytest.raises(ConfigError):
        TauFactor("affine", (1.0,))
    with pytest.raises(ConfigError):
        TauFactor("quadratic", ())


def test_family_param_count_is_checked():
    with pytest.raises(ConfigError):
        CoefficientFamily(name="drift", kind="bounded-rational", params=(1.0, 2.0), vector=True)
    with pytest.raises(ConfigError):
        CoefficientFamily(name="drift", kind="spline", params=(1.0,), vector=True)


def test_affine_vector_drift_and_jacobian():
    fam = CoefficientFamily(name="drift", kind="affine-in-x", params=(0.0, -0.5), dim=1, vector=True)
    x = np.array([[2.0], [-4.0]])
    np.testing.assert_allclose(fam.value(0.0, 0.0, x), [[-1.0], [2.0]])
    np.testing.assert_allclose(fam.jacobian(0.0, 0.0, x), [[[-0.5]], [[-0.5]]])
    assert np.all(fam.hessian(0.0, 0.0, x) == 0.0)


@pytest.mark.parametrize("kind,params", [
    ("bounded-rational", (1.0, -0.5, 0.2)),
    ("bounded-trig", (1.0, 0.7, 1.3, -0.4)),
])
def test_closed_form_derivatives_match_differences(kind, params):
    rng = np.random.default_rng(3)
    for vector in (True, False):
        fam = CoefficientFamily(name="f", kind=kind, params=params, dim=2, vector=vector,
                                tau=TauFactor("affine", (1.0, 0.5)))
        taus = rng.uniform(0.0, 1.0, 50)
        xs = rng.uniform(-3.0, 3.0, (50, 2))
        errs = derivative_errors(fam, taus, taus, xs)
        assert max(errs.values()) < 1e-5


def test_checked_value_names_the_family():
    fam = CoefficientFamily(name="running_cost", kind="bounded-rational", params=(1.0, 0.0, 0.0))
    with pytest.raises(InvalidCoefficientError) as info:
        fam.checked_value(0.0, 0.0, np.array([[np.nan]]))
    assert info.value.family == "running_cost"


def test_wrong_state_dimension():
    fam = CoefficientFamily(name="drift", kind="constant", params=(0.0,), dim=2, vector=True)
    with pytest.raises(DimensionMismatchError):
        fam.value(0.0, 0.0, np.zeros((3, 1)))


def test_impulse_cost_value_and_gradient():
    cost = ImpulseCost(scale=2.0, fixed=1.0, power=1.0, ell0=1.0)
    assert cost.value(0.0, [3.0]) == pytest.approx(8.0)
    np.testing.assert_allclose(cost.xi_gradient(0.0, np.array([[3.0], [0.0]])), [[2.0], [0.0]])
    errs = impulse_derivative_errors(ImpulseCost(scale=1.0, power=0.8, ell0=0.5, mu=0.8), np.array([0.2, 0.5]), np.array([[0.3], [2.0]]))
    assert max(errs.values()) < 1e-5


def test_impulse_cost_rejects_bad_floor():
    with pytest.raises(ConfigError):
        ImpulseCost(scale=1.0, ell0=0.0)
    with pytest.raises(ConfigError):
        ImpulseCost(scale=1.0, mu=1.5)


def test_cone_membership():
    assert cone_contains(HALF_LINE, [1.5])
    assert cone_contains(HALF_LINE, [0.0])
    assert not cone_contains(HALF_LINE, [-0.1])
    assert cone_contains(QUADRANT, [0.3, 1.2])
    assert not cone_contains(QUADRANT, [0.3, -1.2])
    assert not cone_contains(HALF_LINE, [np.inf])


def test_cone_generators_must_be_unit():
    with pytest.raises(ConfigError):
        ConeSpec(dimension=1, generators=((2.0,),))


def test_cone_grid_orders_by_norm():
    grid = cone_grid(QUADRANT, 5)
    assert grid.shape == (25, 2)
    np.testing.assert_array_equal(grid[0], [0.0, 0.0])
    norms = np.linalg.norm(grid, axis=1)
    assert np.all(np.diff(norms) >= -1e-12)
    assert all(cone_contains(QUADRANT, row) for row in grid)


def test_normalize_control_sorts_and_validates():
    control = normalize_control([(0.7, [1.0]), (0.2, [0.5])], 0.0, HALF_LINE, 1.0)
    assert control.times == (0.2, 0.7)
    assert control.sizes == ((0.5,), (1.0,))
    assert control.kappa == 2
    with pytest.raises(SimultaneousImpulsesError):
        normalize_control([(0.5, [1.0]), (0.5, [2.0])], 0.0, HALF_LINE, 1.0)
    with pytest.raises(ConeViolationError):
        normalize_control([(0.5, [-1.0])], 0.0, HALF_LINE, 1.0)
    with pytest.raises(ImpulseOrderError):
        normalize_control([(1.5, [1.0])], 0.0, HALF_LINE, 1.0)
    with pytest.raises(ImpulseOrderError):
        normalize_control([(0.2, [1.0]), (0.4, [1.0])], 0.0, HALF_LINE, 1.0, max_impulses=1)
    with pytest.raises(DimensionMismatchError):
        normalize_control([(0.2, [1.0, 1.0])], 0.0, HALF_LINE, 1.0)


def test_scale_costs_scales_every_cost():
    spec = impulse_active()
    scaled = scale_costs(spec, 2.0)
    x = np.array([[0.3], [1.7]])
    np.testing.assert_allclose(scaled.running_cost.value(0.2, 0.0, x), 2.0 * spec.running_cost.value(0.2, 0.0, x))
    np.testing.assert_allclose(scaled.terminal_cost.value(0.2, 0.0, x), 2.0 * spec.terminal_cost.value(0.2, 0.0, x))
    assert scaled.impulse_cost.value(0.2, [1.0]) == pytest.approx(2.0 * spec.impulse_cost.value(0.2, [1.0]))
    np.testing.assert_allclose(scaled.drift.value(0.2, 0.0, x), spec.drift.value(0.2, 0.0, x))


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_presets_pass_assumption_checks(name):
    report = validate_problem(get_preset(name).build(), sample_count=200, seed=1)
    assert report.passed, report.flags
    assert report.subadditivity_margin > 0.0


def test_validation_is_deterministic():
    a = validate_problem(heat_kernel(), sample_count=150, seed=9).to_dict()
    b = validate_problem(heat_kernel(), sample_count=150, seed=9).to_dict()
    assert a == b


def test_increasing_impulse_cost_is_flagged():
    spec = impulse_active()
    rising = ImpulseCost(scale=1.0, fixed=1.0, power=1.0, tau=TauFactor("affine", (0.1, 0.05)), ell0=0.08)
    report = validate_problem(replace(spec, impulse_cost=rising), sample_count=200)
    assert not report.flags["h2_nonincreasing"]
    assert report.monotonicity_violation > 0.0


def test_validation_needs_samples():
    with pytest.raises(ConfigError):
        validate_problem(heat_kernel(), sample_count=10)


def test_cone_grid_on_the_half_line():
    unit = ConeSpec(dimension=1, generators=((1.0,),), size_cap=1.0)
    grid = cone_grid(unit, 3)
    np.testing.assert_allclose(grid[:, 0], [0.0, 0.5, 1.0])
    with pytest.raises(ConfigError):
        cone_grid(unit, 1)


def test_semiconvexity_bound_uses_the_largest_curvature():
    # -cos x peaks at 1, 4/(1+x^2) has second derivative at most 2
    heat = validate_problem(heat_kernel(), sample_count=1000, seed=2)
    assert heat.semiconvexity_bound == pytest.approx(0.5, abs=1e-3)
    active = validate_problem(impulse_active(), sample_count=1000, seed=2)
    assert active.semiconvexity_bound == pytest.approx(1.0, abs=1e-2)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
