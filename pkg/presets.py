"""Shipped problem scenarios"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from errors import UnknownPresetError
from model import CoefficientFamily, ConeSpec, ImpulseCost, ProblemSpec, TauFactor

HALF_LINE = ConeSpec(dimension=1, generators=((1.0,),), size_cap=5.0)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    build: Callable[[], ProblemSpec]
    x_range: Tuple[float, float]
    x0: float
    oracle: Optional[Callable] = None
    k_sc: Optional[float] = None
    control: Tuple = ()


def _fam(name, kind, params, vector, tau=TauFactor()):
    return CoefficientFamily(name=name, kind=kind, params=tuple(params), dim=1, vector=vector, tau=tau)


def heat_kernel() -> ProblemSpec:
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=_fam("drift", "constant", [0.0], True),
        diffusion=_fam("diffusion", "constant", [1.0], True),
        running_cost=_fam("running_cost", "constant", [0.0], False),
        terminal_cost=_fam("terminal_cost", "bounded-trig", [1.0, 1.0, 1.0, 0.0], False),
        impulse_cost=ImpulseCost(scale=3.0, fixed=1.0, power=1.0, ell0=3.0, mu=1.0),
        cone=HALF_LINE,
        semantics="frozen",
        name="heat-kernel",
    )


def heat_kernel_value(tau, t, x, horizon: float = 1.0):
    """1 + cos(x) exp(-(T - t)/2): Gaussian smoothing of the terminal cost"""
    return 1.0 + np.cos(x) * np.exp(-(horizon - np.asarray(t)) / 2.0)


def impulse_active() -> ProblemSpec:
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=_fam("drift", "affine-in-x", [0.0, -0.5], True),
        diffusion=_fam("diffusion", "constant", [0.3], True),
        running_cost=_fam("running_cost", "bounded-rational", [4.0, 0.0, 0.0], False),
        terminal_cost=_fam("terminal_cost", "bounded-rational", [2.0, 0.0, 0.0], False),
        impulse_cost=ImpulseCost(scale=1.0, fixed=1.0, power=1.0, tau=TauFactor("affine", (0.1, -0.02)), ell0=0.08, mu=1.0),
        cone=HALF_LINE,
        semantics="frozen",
        name="impulse-active",
    )


def loan() -> ProblemSpec:
    """Borrowing at time tau adds repayment drift and a tau-dependent interest charge"""
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=_fam("drift", "bounded-rational", [0.3, 0.0, 0.0], True, TauFactor("affine", (1.0, -0.5))),
        diffusion=_fam("diffusion", "constant", [0.2], True),
        running_cost=_fam("running_cost", "bounded-rational", [1.0, -0.5, 0.2], False, TauFactor("affine", (0.2, 0.3))),
        terminal_cost=_fam("terminal_cost", "bounded-rational", [2.0, 0.0, 0.0], False),
        impulse_cost=ImpulseCost(scale=1.0, fixed=1.0, power=0.8, tau=TauFactor("affine", (0.15, -0.05)), ell0=0.1, mu=0.8),
        cone=HALF_LINE,
        semantics="stacking",
        name="loan",
    )


def linear_adjoint() -> ProblemSpec:
    """State-independent drift, diffusion and running cost with tau-dependent levels"""
    return ProblemSpec(
        dim_state=1,
        horizon=1.0,
        tau0=0.0,
        drift=_fam("drift", "constant", [0.1], True, TauFactor("affine", (1.0, 0.5))),
        diffusion=_fam("diffusion", "constant", [0.4], True, TauFactor("affine", (1.0, 0.25))),
        running_cost=_fam("running_cost", "constant", [0.5], False, TauFactor("affine", (1.0, -0.2))),
        terminal_cost=_fam("terminal_cost", "bounded-trig", [1.0, 1.0, 1.0, 0.0], False),
        impulse_cost=ImpulseCost(scale=0.5, fixed=1.0, power=1.0, tau=TauFactor("affine", (1.0, -0.2)), ell0=0.4, mu=1.0),
        cone=HALF_LINE,
        semantics="stacking",
        name="linear-adjoint",
    )


CATALOG: Dict[str, Preset] = {
    "heat-kernel": Preset(
        name="heat-kernel",
        description="no-impulse analytic benchmark",
        build=heat_kernel,
        x_range=(-math.pi, math.pi),
        x0=0.0,
        oracle=heat_kernel_value,
        k_sc=0.5,
    ),
    "impulse-active": Preset(
        name="impulse-active",
        description="cheap impulses away from a costly neighbourhood of the origin",
        build=impulse_active,
        x_range=(-4.0, 8.0),
        x0=0.0,
    ),
    "loan": Preset(
        name="loan",
        description="bounded-coefficient borrowing scenario",
        build=loan,
        x_range=(-4.0, 6.0),
        x0=0.0,
        control=((0.3, 0.8),),
    ),
    "linear-adjoint": Preset(
        name="linear-adjoint",
        description="constant-coefficient adjoint benchmarks",
        build=linear_adjoint,
        x_range=(-2 * math.pi, 2 * math.pi),
        x0=0.0,
        control=((0.4, 0.5),),
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return CATALOG[name]
    except KeyError:
        raise UnknownPresetError(f"unknown preset '{name}' (known: {', '.join(sorted(CATALOG))})") from None
