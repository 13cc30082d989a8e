#!/usr/bin/env python3
"""
Tests for the frozen coefficient processes and the regression adjoint solvers
"""
import sys

import numpy as np
import pytest

from adjoint import (
    FirstAdjoint,
    Regressor,
    compute_frozen,
    cv_residual_variance,
    feynman_kac_check,
    hamiltonian_bundle,
    make_optimal_bundle,
    node_summary,
    solve_first_adjoint,
    solve_second_adjoint,
)
from errors import ConfigError, DerivativeInconsistencyError
from model import CoefficientFamily, ImpulseControl, ImpulseCost, ProblemSpec, TauFactor
from presets import HALF_LINE, impulse_active, linear_adjoint

ONE_IMPULSE = ImpulseControl(start_time=0.0, times=(0.5,), sizes=((1.0,),))


def _fam(name, kind, params, vector, tau=TauFactor()):
    return CoefficientFamily(name=name, kind=kind, params=tuple(params), dim=1, vector=vector, tau=tau)


def make_spec(drift=None, diffusion=None, running=None, terminal=None):
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=drift or _fam("drift", "constant", [0.1], True),
        diffusion=diffusion or _fam("diffusion", "constant", [0.3], True),
        running_cost=running or _fam("running_cost", "constant", [0.5], False),
        terminal_cost=terminal or _fam("terminal_cost", "bounded-trig", [1.0, 1.0, 1.0, 0.0], False),
        impulse_cost=ImpulseCost(scale=1.0, ell0=1.0),
        cone=HALF_LINE,
    )


class ShiftedJacobian(CoefficientFamily):
    def jacobian(self, tau, t, x):
        return super().jacobian(tau, t, x) + 1.0


def test_stacked_jacobian_doubles_after_the_impulse():
    spec = impulse_active()
    bundle = make_optimal_bundle(spec, ONE_IMPULSE, [0.0], paths=20, base_steps=20, seed=1)
    frozen = compute_frozen(spec, bundle)
    node = bundle.grid.index_of(0.5)
    np.testing.assert_allclose(frozen.B_x[:, :node], -0.5)
    np.testing.assert_allclose(frozen.B_x[:, node:], -1.0)
    assert frozen.impulses[0].node == node
    assert frozen.fd_errors
    assert all(v <= 1e-4 for v in frozen.fd_errors.values())


def test_zeta_of_affine_tau_drift_is_deterministic():
    spec = make_spec(drift=_fam("drift", "constant", [0.1], True, TauFactor("affine", (1.0, 1.0))))
    bundle = make_optimal_bundle(spec, ONE_IMPULSE, [0.0], paths=10, base_steps=20, seed=2)
    frozen = compute_frozen(spec, bundle)
    zeta = frozen.impulses[0].zeta[:, :, 0]
    expected = 0.1 * np.maximum(bundle.grid.nodes - 0.5, 0.0)
    np.testing.assert_allclose(zeta, np.broadcast_to(expected, zeta.shape), atol=1e-12)


def test_inconsistent_derivative_is_caught():
    bad = ShiftedJacobian(name="drift", kind="affine-in-x", params=(0.0, -0.5), dim=1, vector=True)
    spec = make_spec(drift=bad)
    bundle = make_optimal_bundle(spec, ImpulseControl(start_time=0.0), [0.0], paths=10, base_steps=16, seed=3)
    with pytest.raises(DerivativeInconsistencyError) as info:
        compute_frozen(spec, bundle)
    assert info.value.family == "drift"


def test_first_adjoint_with_constant_driver():
    c = 0.7
    spec = make_spec(running=_fam("running_cost", "affine-in-x", [0.0, c], False))
    bundle = make_optimal_bundle(spec, ImpulseControl(start_time=0.0), [0.0], paths=1000, base_steps=20, seed=4)
    frozen = compute_frozen(spec, bundle)
    first = solve_first_adjoint(frozen, bundle)
    np.testing.assert_array_equal(first.Y[:, -1], frozen.H_x)
    assert np.allclose(first.Y[:, 0], first.Y[0, 0])
    assert first.Y[0, 0, 0] == pytest.approx(np.mean(frozen.H_x) + c * 1.0, abs=1e-10)
    assert first.degrees[0] == 3


def test_second_adjoint_follows_its_linear_mean_recursion():
    a, steps = -0.5, 50
    spec = make_spec(drift=_fam("drift", "affine-in-x", [0.0, a], True))
    bundle = make_optimal_bundle(spec, ImpulseControl(start_time=0.0), [1.0], paths=1000, base_steps=steps, seed=5)
    frozen = compute_frozen(spec, bundle)
    first = solve_first_adjoint(frozen, bundle)
    second = solve_second_adjoint(frozen, first, bundle)
    dt = 1.0 / steps
    expected = np.mean(frozen.H_xx) / (1.0 - 2.0 * a * dt) ** steps
    assert second.P[0, 0, 0, 0] == pytest.approx(expected, rel=1e-7)
    np.testing.assert_array_equal(second.P[:, -1], frozen.H_xx)
    np.testing.assert_allclose(second.P, np.swapaxes(second.P, -1, -2))
    rows = node_summary(first, second, bundle.grid)
    assert len(rows) == steps + 1
    assert rows[0]["P_std"] == pytest.approx(0.0, abs=1e-12)


def test_regressions_need_enough_paths():
    spec = make_spec()
    bundle = make_optimal_bundle(spec, ImpulseControl(start_time=0.0), [0.0], paths=200, base_steps=16, seed=6)
    frozen = compute_frozen(spec, bundle)
    with pytest.raises(ConfigError):
        solve_first_adjoint(frozen, bundle)


def test_hamiltonian_with_zero_adjoints_is_the_running_cost():
    spec = impulse_active()
    bundle = make_optimal_bundle(spec, ONE_IMPULSE, [0.0], paths=20, base_steps=20, seed=7)
    frozen = compute_frozen(spec, bundle)
    zeros = np.zeros(frozen.B.shape)
    first = FirstAdjoint(Y=zeros, Z=zeros, y_coefficients=[], z_coefficients=[], degrees=[], cv_variance=np.zeros(1))
    ham = hamiltonian_bundle(frozen, first, bundle)
    np.testing.assert_array_equal(ham.H, frozen.G)
    np.testing.assert_array_equal(ham.H_x, frozen.G_x)
    np.testing.assert_array_equal(ham.H_xx, frozen.G_xx)


def test_regressor_reproduces_polynomials():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(500, 1))
    target = 2.0 - x[:, 0] + 0.5 * x[:, 0] ** 2
    reg = Regressor(x, 3)
    np.testing.assert_allclose(reg.project(target), target, atol=1e-9)
    assert cv_residual_variance(x, target, 3) == pytest.approx(0.0, abs=1e-16)
    flat = Regressor(np.ones((50, 1)), 3)
    assert flat.design.shape == (50, 1)


def test_first_adjoint_agrees_with_the_pde_gradient():
    spec = linear_adjoint()
    bundle = make_optimal_bundle(spec, ImpulseControl(start_time=0.0), [0.0], paths=2000, base_steps=40, seed=9)
    frozen = compute_frozen(spec, bundle)
    first = solve_first_adjoint(frozen, bundle)
    report = feynman_kac_check(spec, first, bundle)
    assert report.max_mean_gap <= 0.05


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
