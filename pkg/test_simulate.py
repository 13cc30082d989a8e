#!/usr/bin/env python3
"""
Tests for the time grid, Brownian drivers, state simulation and cost estimates
"""
import sys

import numpy as np
import pytest

from errors import ConfigError, DivergenceError, ImpulseOrderError
from model import CoefficientFamily, ImpulseControl, ImpulseCost, ProblemSpec
from presets import HALF_LINE, heat_kernel, impulse_active
from simulate import (
    continuity_probe,
    estimate_cost,
    make_noise,
    make_time_grid,
    moment_bound,
    semantics_gap,
    simulate_state,
    trivial_cost,
)


def _fam(name, kind, params, vector):
    return CoefficientFamily(name=name, kind=kind, params=tuple(params), dim=1, vector=vector)


def constant_drift_spec(semantics="stacking", sigma=0.0, slope=None):
    drift = _fam("drift", "constant", [1.0], True) if slope is None else _fam("drift", "affine-in-x", [0.0, slope], True)
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=drift,
        diffusion=_fam("diffusion", "constant", [sigma], True),
        running_cost=_fam("running_cost", "constant", [1.0], False),
        terminal_cost=_fam("terminal_cost", "constant", [0.0], False),
        impulse_cost=ImpulseCost(scale=1.0, ell0=1.0),
        cone=HALF_LINE,
        semantics=semantics,
    )


def test_grid_inserts_impulse_times():
    control = ImpulseControl(start_time=0.0, times=(0.333,), sizes=((1.0,),))
    grid = make_time_grid(0.0, 1.0, control, 16)
    assert grid.steps == 17
    assert grid.index_of(0.333) > 0
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 1.0
    with pytest.raises(ImpulseOrderError):
        grid.index_of(0.3)
    with pytest.raises(ImpulseOrderError):
        make_time_grid(0.5, 1.0, control, 16)
    with pytest.raises(ConfigError):
        make_time_grid(1.0, 1.0, None, 16)


def test_noise_depends_only_on_path_id():
    grid = make_time_grid(0.0, 1.0, None, 20)
    full = make_noise(grid, 15, seed=11)
    tail = make_noise(grid, 10, seed=11, first_path=5)
    np.testing.assert_array_equal(full.increments[5:], tail.increments)
    other = make_noise(grid, 15, seed=12)
    assert not np.array_equal(full.increments, other.increments)


@pytest.mark.parametrize("semantics,expected", [("stacking", 1.5), ("frozen", 1.0)])
def test_semantics_of_a_single_impulse(semantics, expected):
    spec = constant_drift_spec(semantics)
    control = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((0.75,),))
    grid = make_time_grid(0.0, 1.0, control, 16)
    traj = simulate_state(spec, control, [0.0], grid, make_noise(grid, 3, seed=1))
    k = grid.index_of(0.5)
    np.testing.assert_allclose(traj.post[:, -1, 0], expected + 0.75)
    np.testing.assert_allclose(traj.post[:, k, 0] - traj.pre[:, k, 0], 0.75)
    assert traj.active_count[0, -1] == (2 if semantics == "stacking" else 1)
    if semantics == "stacking":
        assert traj.active_set(0, k) == [0.0, 0.5]
        assert traj.active_set(0, k - 1) == [0.0]


def test_zero_noise_cost_is_exact():
    spec = constant_drift_spec("frozen")
    control = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((2.0,),))
    est = estimate_cost(spec, control, [0.0], paths=100, base_steps=16, seed=3)
    assert est.mean == pytest.approx(1.0 + 3.0)
    assert est.standard_error == pytest.approx(0.0, abs=1e-12)


def test_heat_kernel_cost_without_impulses():
    est = trivial_cost(heat_kernel(), [0.0], 0.0, paths=4000, base_steps=16, seed=7)
    exact = 1.0 + np.exp(-0.5)
    assert abs(est.mean - exact) <= 4.0 * est.standard_error
    assert est.path_count == 4000


def test_estimate_is_independent_of_threads():
    spec = impulse_active()
    control = ImpulseControl(start_time=0.0, times=(0.25,), sizes=((2.0,),))
    one = estimate_cost(spec, control, [0.0], paths=4500, base_steps=16, seed=5, threads=1)
    two = estimate_cost(spec, control, [0.0], paths=4500, base_steps=16, seed=5, threads=3)
    assert one.mean == two.mean
    assert one.standard_error == two.standard_error
    np.testing.assert_array_equal(one.per_path, two.per_path)


def test_divergence_is_reported():
    spec = constant_drift_spec(slope=1000.0)
    with pytest.raises(DivergenceError) as info:
        estimate_cost(spec, ImpulseControl(start_time=0.0), [1.0], paths=100, base_steps=16, seed=0)
    assert info.value.node > 0


def test_estimate_needs_enough_paths():
    with pytest.raises(ConfigError):
        trivial_cost(heat_kernel(), [0.0], 0.0, paths=50, base_steps=16, seed=0)


def test_semantics_gap_vanishes_without_impulses():
    gap = semantics_gap(impulse_active(), ImpulseControl(start_time=0.0), [0.5], paths=200, base_steps=16, seed=2)
    assert gap.mean == 0.0


def test_time_grid_needs_sixteen_steps():
    with pytest.raises(ConfigError):
        make_time_grid(0.0, 1.0, None, 8)
    with pytest.raises(ConfigError):
        estimate_cost(constant_drift_spec(), ImpulseControl(start_time=0.0), [0.0], paths=100, base_steps=15, seed=0)
    assert make_time_grid(0.0, 1.0, None, 16).steps == 16


def test_continuity_gap_grows_with_the_initial_offset():
    spec = constant_drift_spec("frozen", sigma=0.5, slope=-0.5)
    control = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((0.4,),))
    second = []
    for offset in (0.0, 0.05, 0.1, 0.2):
        moments = continuity_probe(spec, control, [0.0], [offset], 0.0, 0.0, paths=200, base_steps=16, seed=8)
        assert set(moments) == {2, 4}
        second.append(moments[2].mean)
        assert moments[2].mean == pytest.approx(offset ** 2, rel=1e-9, abs=1e-15)
        assert moments[4].mean == pytest.approx(offset ** 4, rel=1e-9, abs=1e-15)
    assert second[0] == 0.0
    assert second == sorted(second)


def test_continuity_gap_ignores_tau_when_coefficients_do():
    spec = constant_drift_spec("stacking", sigma=0.5)
    control = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((0.4,),))
    moments = continuity_probe(spec, control, [0.2], [0.2], 0.0, 0.3, paths=200, base_steps=16, seed=8)
    assert moments[2].mean == 0.0


def test_moment_bound_of_a_deterministic_path():
    spec = constant_drift_spec("frozen")
    control = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((0.75,),))
    est = moment_bound(spec, control, [0.0], 2, paths=100, base_steps=16, seed=1)
    assert est.mean == pytest.approx(1.75 ** 2)
    stacked = moment_bound(constant_drift_spec("stacking"), control, [0.0], 2, paths=100, base_steps=16, seed=1)
    assert stacked.mean == pytest.approx(2.25 ** 2)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
