"""Spike perturbations of one impulse, variational processes and maximum-principle checks"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import mc_stats
from adjoint import FirstAdjoint, FrozenCoefficients, OptimalBundle, SecondAdjoint, hamiltonian_bundle, hamiltonian_xx
from errors import (
    BundleMismatchError,
    ConeViolationError,
    ConfigError,
    DivergenceError,
    ImpulseOrderError,
    OrderCheckInconclusiveError,
)
from model import TIME_TOL, ImpulseControl, ProblemSpec, cone_contains, cone_grid
from simulate import BLOWUP, Trajectory, _march, simulate_state

logger = logging.getLogger(__name__)

DIRECTIONS = ("forward", "backward")
EXACT_FLOOR = 1e-26


@dataclass(frozen=True)
class Perturbation:
    """Impulse `index` (1-based) moved by +/- time_shift with size (1 - eps) xi_i + eps target"""
    index: int
    size_weight: float
    time_shift: float
    direction: str = "forward"
    target: Optional[tuple] = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown perturbation direction '{self.direction}'")
        if not 0.0 <= self.size_weight < 1.0 or not 0.0 <= self.time_shift < 1.0:
            raise ConfigError("perturbation weights must lie in [0, 1)")
        if self.index < 1:
            raise ConfigError("impulse index is 1-based")

    @property
    def sign(self) -> int:
        return 1 if self.direction == "forward" else -1

    def eta(self, xi_bar: np.ndarray) -> np.ndarray:
        return xi_bar if self.target is None else np.asarray(self.target, dtype=float)

    def direction_vector(self, xi_bar: np.ndarray) -> np.ndarray:
        return self.eta(xi_bar) - xi_bar


def perturbation_times(control: ImpulseControl, perturbations: Sequence[Perturbation]) -> List[float]:
    """Extra grid nodes so the perturbed controls share the optimal grid"""
    times = set()
    for p in perturbations:
        if p.index > control.kappa:
            raise ImpulseOrderError(f"impulse {p.index} does not exist (kappa = {control.kappa})")
        times.add(round(control.times[p.index - 1] + p.sign * p.time_shift, 12))
    return sorted(times)


def perturb_control(optimal: ImpulseControl, p: Perturbation, cone, horizon: float) -> ImpulseControl:
    if p.index > optimal.kappa:
        raise ImpulseOrderError(f"impulse {p.index} does not exist (kappa = {optimal.kappa})")
    i = p.index - 1
    tau = optimal.times[i]
    moved = tau + p.sign * p.time_shift
    if p.time_shift > 0:
        if p.sign > 0:
            upper = optimal.times[i + 1] if i + 1 < optimal.kappa else horizon
            if not moved < upper - TIME_TOL:
                raise ImpulseOrderError(f"forward shift of impulse {p.index} to {moved} reaches {upper}")
        else:
            lower = optimal.times[i - 1] if i > 0 else optimal.start_time
            if not moved > lower + TIME_TOL:
                raise ImpulseOrderError(f"backward shift of impulse {p.index} to {moved} reaches {lower}")
    xi_bar = np.asarray(optimal.sizes[i], dtype=float)
    eta = p.eta(xi_bar)
    if not cone_contains(cone, eta):
        raise ConeViolationError(f"perturbation target {eta.tolist()} is outside the cone")
    size = xi_bar + p.size_weight * (eta - xi_bar)
    times = list(optimal.times)
    sizes = list(optimal.sizes)
    times[i] = moved
    sizes[i] = tuple(size.tolist())
    return ImpulseControl(start_time=optimal.start_time, times=tuple(times), sizes=tuple(sizes))


@dataclass
class VariationalProcesses:
    perturbation: Perturbation
    control: ImpulseControl
    perturbed: Trajectory
    X1: np.ndarray
    X2: np.ndarray
    X1_hat: np.ndarray
    X2_hat: np.ndarray
    Phi: np.ndarray
    b1_hat: np.ndarray
    s1_hat: np.ndarray
    b2_hat: np.ndarray
    s2_hat: np.ndarray
    window: np.ndarray
    after: np.ndarray
    xi_dir: np.ndarray
    moved_time: float


def _mv(m, v):
    return np.einsum("pij,pj->pi", m, v)


def _quad(t, v):
    return np.einsum("pijk,pj,pk->pi", t, v, v)


def simulate_variational(spec: ProblemSpec, bundle: OptimalBundle, frozen: FrozenCoefficients, p: Perturbation) -> VariationalProcesses:
    """First and second order variations of the state on the bundle noise.

    On the perturbation window the linearization uses the perturbed activation
    (copy i removed for a delay, added for an advance); elsewhere the frozen
    coefficients of the optimal pair.
    """
    if frozen.shape != (bundle.paths, bundle.grid.steps + 1):
        raise BundleMismatchError("frozen coefficients do not match the bundle")
    control = perturb_control(bundle.control, p, spec.cone, spec.horizon)
    term = frozen.impulses[p.index - 1]
    s = p.sign
    grid = bundle.grid
    moved = term.tau + s * p.time_shift
    try:
        grid.index_of(moved)
    except ImpulseOrderError:
        raise BundleMismatchError(f"perturbed time {moved} is not a bundle node; build the bundle with perturbation_times") from None
    t = grid.nodes
    if s > 0:
        window = (t >= term.tau - TIME_TOL) & (t < moved - TIME_TOL)
    else:
        window = (t >= moved - TIME_TOL) & (t < term.tau - TIME_TOL)
    after = t >= moved - TIME_TOL
    w = window.astype(float)
    a = after.astype(float)

    perturbed = simulate_state(bundle.spec, control, bundle.x0, grid, bundle.noise)

    P, nodes, n = bundle.trajectory.post.shape
    xi_bar = term.xi
    xi_dir = p.direction_vector(xi_bar)
    eps, eps_bar = p.size_weight, p.time_shift
    dt, dW = grid.dt, bundle.noise.increments
    out = {name: np.zeros((P, nodes, n)) for name in ("X1", "X2", "X1_hat", "X2_hat", "b1", "s1", "b2", "s2")}
    x1h = np.zeros((P, n))
    x2h = np.zeros((P, n))
    for k in range(nodes):
        B_x, S_x = frozen.B_x[:, k], frozen.S_x[:, k]
        Bt_x = B_x - s * w[k] * term.copy_b_x[:, k]
        St_x = S_x - s * w[k] * term.copy_sigma_x[:, k]
        Bt_xx = frozen.B_xx[:, k] - s * w[k] * term.copy_b_xx[:, k]
        St_xx = frozen.S_xx[:, k] - s * w[k] * term.copy_sigma_xx[:, k]

        x1 = x1h - s * w[k] * xi_bar
        x2 = x2h + s * eps_bar * term.zeta[:, k] + eps * a[k] * xi_dir
        b1 = _mv(Bt_x, x1) - _mv(B_x, x1h)
        s1 = _mv(St_x, x1) - s * w[k] * term.copy_sigma[:, k] - _mv(S_x, x1h)
        b2 = _mv(Bt_x, x2) - _mv(B_x, x2h) + _quad(Bt_xx, x1) - s * w[k] * term.copy_b[:, k]
        s2 = _mv(St_x, x2) - _mv(S_x, x2h) + _quad(St_xx, x1)
        for name, val in (("X1", x1), ("X2", x2), ("X1_hat", x1h), ("X2_hat", x2h),
                          ("b1", b1), ("s1", s1), ("b2", b2), ("s2", s2)):
            out[name][:, k] = val
        if k == nodes - 1:
            break
        x1h = x1h + (_mv(B_x, x1h) + b1) * dt[k] + (_mv(S_x, x1h) + s1) * dW[:, k, None]
        x2h = x2h + (_mv(B_x, x2h) + b2) * dt[k] + (_mv(S_x, x2h) + s2) * dW[:, k, None]
        if not (np.all(np.isfinite(x1h)) and np.all(np.isfinite(x2h))) or max(np.max(np.abs(x1h)), np.max(np.abs(x2h))) > BLOWUP:
            raise DivergenceError(k + 1, "variational process")

    X1h = out["X1_hat"]
    return VariationalProcesses(
        perturbation=p,
        control=control,
        perturbed=perturbed,
        X1=out["X1"],
        X2=out["X2"],
        X1_hat=X1h,
        X2_hat=out["X2_hat"],
        Phi=np.einsum("pki,pkj->pkij", X1h, X1h),
        b1_hat=out["b1"],
        s1_hat=out["s1"],
        b2_hat=out["b2"],
        s2_hat=out["s2"],
        window=window,
        after=after,
        xi_dir=xi_dir,
        moved_time=float(moved),
    )


def _integral(values: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Left-endpoint quadrature of a (paths, nodes) array"""
    return values[:, :-1] @ dt


# -- expansion orders --------------------------------------------------------

CLAIMS = ("x1", "x_minus_x1", "x2", "remainder", "x_minus_xbar")


@dataclass
class ExpansionReport:
    m: int
    epsilons: List[float]
    coupling: float
    rows: List[dict]
    slopes: Dict[str, float]
    criteria: Dict[str, float]
    passed_claims: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.passed_claims.values())

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "epsilons": self.epsilons,
            "coupling": self.coupling,
            "slopes": self.slopes,
            "criteria": self.criteria,
            "passed_claims": self.passed_claims,
            "passed": self.passed,
        }


def _criteria(m: int) -> Dict[str, float]:
    return {"x1": 0.8, "x_minus_x1": 0.9 * 2 * m, "remainder": 2 * m + 0.2}


def check_expansion_orders(spec: ProblemSpec, bundle: OptimalBundle, frozen: FrozenCoefficients, index: int = 1,
                           epsilons: Sequence[float] = (0.2, 0.1, 0.05, 0.025), coupling: float = 1.0,
                           direction: str = "forward", target: Optional[tuple] = None, m: int = 1,
                           strict: bool = True) -> ExpansionReport:
    """Fitted log-log slopes of E int |.|^{2m} for the expansion claims over a geometric eps grid"""
    if len(epsilons) < 4:
        raise ConfigError("the expansion check needs at least four eps values")
    if m not in (1, 2):
        raise ConfigError("m must be 1 or 2")
    epsilons = sorted(epsilons, reverse=True)
    dt = bundle.grid.dt
    base = bundle.trajectory.post
    if target is None:
        target = tuple((2.0 * bundle.control.size_array(spec.dim_state)[index - 1]).tolist())
    rows = []
    series = {claim: [] for claim in CLAIMS}
    for eps in epsilons:
        p = Perturbation(index=index, size_weight=eps, time_shift=coupling * eps, direction=direction, target=target)
        var = simulate_variational(spec, bundle, frozen, p)
        D = var.perturbed.post - base
        parts = {
            "x1": var.X1,
            "x_minus_x1": D - var.X1,
            "x2": var.X2,
            "remainder": D - var.X1 - var.X2,
            "x_minus_xbar": D,
        }
        for claim, proc in parts.items():
            est = mc_stats.estimate(_integral(np.linalg.norm(proc, axis=-1) ** (2 * m), dt))
            series[claim].append(est)
            rows.append({"epsilon": eps, "epsilon_bar": coupling * eps, "claim": claim,
                         "estimate": est.mean, "stderr": est.stderr})

    criteria = _criteria(m)
    slopes: Dict[str, float] = {}
    passed: Dict[str, bool] = {}
    for claim, ests in series.items():
        means = np.array([e.mean for e in ests])
        if np.all(means <= EXACT_FLOOR):
            slopes[claim] = float("inf")
        elif np.any(means <= 0.0):
            slopes[claim] = float("nan")
        else:
            slopes[claim] = mc_stats.fit_slope(epsilons, means)
        if claim in criteria:
            for big, small in zip(ests, ests[1:]):
                noise = 3.0 * mc_stats.combined_stderr(big.stderr, small.stderr) + EXACT_FLOOR
                if small.mean > big.mean + noise and strict:
                    raise OrderCheckInconclusiveError(claim, means.tolist())
            passed[claim] = bool(slopes[claim] >= criteria[claim])
        logger.info(f"📊 {claim}: slope {slopes[claim]:.3f} over eps {list(epsilons)}")
    report = ExpansionReport(m=m, epsilons=list(epsilons), coupling=coupling, rows=rows,
                             slopes=slopes, criteria=criteria, passed_claims=passed)
    logger.info(f"{'✅' if report.passed else '❌'} expansion orders (m={m})")
    return report


# -- duality and the variational inequality ---------------------------------

@dataclass
class DualityResult:
    lhs: mc_stats.Estimate
    rhs: mc_stats.Estimate
    gap: mc_stats.Estimate
    combined_stderr: float

    def passed(self, k: float = 3.0) -> bool:
        return abs(self.gap.mean) <= k * self.combined_stderr + 1e-12

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs.to_dict(),
            "rhs": self.rhs.to_dict(),
            "gap": self.gap.to_dict(),
            "combined_stderr": self.combined_stderr,
            "passed": self.passed(),
        }


def _duality(lhs: np.ndarray, rhs: np.ndarray) -> DualityResult:
    left = mc_stats.estimate(lhs)
    right = mc_stats.estimate(rhs)
    return DualityResult(lhs=left, rhs=right, gap=mc_stats.difference(lhs, rhs),
                         combined_stderr=mc_stats.combined_stderr(left.stderr, right.stderr))


def _check_inputs(frozen: FrozenCoefficients, var: VariationalProcesses, *adjoints):
    shape = var.X1.shape[:2]
    if frozen.shape != shape or any(a.shape[:2] != shape for a in adjoints):
        raise BundleMismatchError("adjoints, frozen coefficients and variational processes differ in shape")


def duality_first(frozen: FrozenCoefficients, first: FirstAdjoint, var: VariationalProcesses, dt: np.ndarray) -> DualityResult:
    """E[H_x Xh(T) + int G_x Xh] against E int <Y, bh> + <Z, sh>, Xh = Xh1 + Xh2"""
    _check_inputs(frozen, var, first.Y)
    xh = var.X1_hat + var.X2_hat
    lhs = np.einsum("pi,pi->p", frozen.H_x, xh[:, -1]) + _integral(np.einsum("pki,pki->pk", frozen.G_x, xh), dt)
    rhs = _integral(np.einsum("pki,pki->pk", first.Y, var.b1_hat + var.b2_hat)
                    + np.einsum("pki,pki->pk", first.Z, var.s1_hat + var.s2_hat), dt)
    return _duality(lhs, rhs)


def duality_second(frozen: FrozenCoefficients, first: FirstAdjoint, second: SecondAdjoint, var: VariationalProcesses,
                   dt: np.ndarray) -> DualityResult:
    """Ito identity for Xh1' P Xh1 with the source terms of the first variation"""
    _check_inputs(frozen, var, first.Y, second.P)
    x = var.X1_hat
    b, sg = var.b1_hat, var.s1_hat
    P, Q = second.P, second.Q
    hxx = hamiltonian_xx(frozen, first)
    lhs = (np.einsum("pi,pij,pj->p", x[:, -1], frozen.H_xx, x[:, -1])
           + _integral(np.einsum("pki,pkij,pkj->pk", x, hxx, x), dt))
    Sx = np.einsum("pkij,pkj->pki", frozen.S_x, x)
    integrand = (2.0 * np.einsum("pki,pkij,pkj->pk", x, P, b)
                 + 2.0 * np.einsum("pki,pkij,pkj->pk", Sx, P, sg)
                 + np.einsum("pki,pkij,pkj->pk", sg, P, sg)
                 + 2.0 * np.einsum("pki,pkij,pkj->pk", x, Q, sg))
    rhs = _integral(integrand, dt)
    return _duality(lhs, rhs)


@dataclass
class VariationalResult:
    formula: mc_stats.Estimate
    taylor: mc_stats.Estimate
    direct: mc_stats.Estimate

    def to_dict(self) -> dict:
        return {"formula": self.formula.to_dict(), "taylor": self.taylor.to_dict(), "direct": self.direct.to_dict()}


def _total_cost(spec: ProblemSpec, bundle: OptimalBundle, control: ImpulseControl) -> np.ndarray:
    out = _march(spec, bundle.x0, bundle.grid, bundle.noise.increments, control=control)
    return out["running"] + out["impulse"] + out["terminal"]


def variational_inequality(spec: ProblemSpec, bundle: OptimalBundle, frozen: FrozenCoefficients, first: FirstAdjoint,
                           var: VariationalProcesses) -> VariationalResult:
    """Second-order estimate of J(perturbed) - J(optimal), with and without duality, and the direct difference"""
    _check_inputs(frozen, var, first.Y)
    p = var.perturbation
    s = p.sign
    term = frozen.impulses[p.index - 1]
    dt = bundle.grid.dt
    w = var.window.astype(float)[None, :]
    X1, X2, X1h, X2h = var.X1, var.X2, var.X1_hat, var.X2_hat

    non_hat = (X1 - X1h) + (X2 - X2h)
    Gt_xx = frozen.G_xx - s * w[..., None, None] * term.copy_g_xx
    rest = (np.einsum("pi,pi->p", frozen.H_x, non_hat[:, -1])
            + _integral(np.einsum("pki,pki->pk", frozen.G_x, non_hat), dt)
            - s * _integral(w * np.einsum("pki,pki->pk", term.copy_g_x, X1 + X2), dt)
            + np.einsum("pi,pij,pj->p", X1[:, -1], frozen.H_xx, X1[:, -1])
            + _integral(np.einsum("pki,pkij,pkj->pk", X1, Gt_xx, X1), dt)
            - s * _integral(w * term.copy_g, dt)
            + s * p.time_shift * (term.ell_tau + _integral(term.g_tau, dt))
            + p.size_weight * float(term.ell_xi @ var.xi_dir))

    xh = X1h + X2h
    dual_lhs = np.einsum("pi,pi->p", frozen.H_x, xh[:, -1]) + _integral(np.einsum("pki,pki->pk", frozen.G_x, xh), dt)
    dual_rhs = _integral(np.einsum("pki,pki->pk", first.Y, var.b1_hat + var.b2_hat)
                         + np.einsum("pki,pki->pk", first.Z, var.s1_hat + var.s2_hat), dt)
    direct = _total_cost(bundle.spec, bundle, var.control) - _total_cost(bundle.spec, bundle, bundle.control)
    result = VariationalResult(formula=mc_stats.estimate(dual_rhs + rest),
                               taylor=mc_stats.estimate(dual_lhs + rest),
                               direct=mc_stats.estimate(direct))
    logger.info(f"📊 variation of impulse {p.index} ({p.direction}, eps={p.size_weight}, eps_bar={p.time_shift}): "
                f"formula {result.formula.mean:.4e}, direct {result.direct.mean:.4e}")
    return result


# -- maximum-principle conditions ------------------------------------------

def designate_case(control: ImpulseControl, index: int, horizon: float) -> str:
    """interior (equality), initial (tau_1 = t, >=) or terminal (tau_kappa = T, <=)"""
    tau = control.times[index - 1]
    if index == 1 and abs(tau - control.start_time) <= TIME_TOL:
        return "initial"
    if index == control.kappa and abs(tau - horizon) <= TIME_TOL:
        return "terminal"
    return "interior"


def _lower_pass(est: mc_stats.Estimate, scale: float, tolerance: float) -> bool:
    return est.mean >= -3.0 * est.stderr - tolerance * scale


@dataclass
class ImpulseConditions:
    index: int
    case: str
    mp1: Optional[mc_stats.Estimate]
    mp1_window: Optional[mc_stats.Estimate]
    mp1_passed: Optional[bool]
    mp2: Dict[float, mc_stats.Estimate]
    mp2_literal: Dict[float, mc_stats.Estimate]
    mp2_passed: bool
    stationarity: mc_stats.Estimate
    stationarity_tag: str
    stationarity_passed: bool

    @property
    def passed(self) -> bool:
        return self.mp2_passed and self.stationarity_passed and self.mp1_passed is not False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "case": self.case,
            "mp1": self.mp1.to_dict() if self.mp1 else None,
            "mp1_window": self.mp1_window.to_dict() if self.mp1_window else None,
            "mp1_passed": self.mp1_passed,
            "mp2": {f"{eta:g}": e.to_dict() for eta, e in self.mp2.items()},
            "mp2_min": min(e.mean for e in self.mp2.values()) if self.mp2 else None,
            "mp2_literal": {f"{eta:g}": e.to_dict() for eta, e in self.mp2_literal.items()},
            "mp2_passed": self.mp2_passed,
            "stationarity": self.stationarity.to_dict(),
            "stationarity_tag": self.stationarity_tag,
            "stationarity_passed": self.stationarity_passed,
            "passed": self.passed,
        }


@dataclass
class MPReport:
    conditions: List[ImpulseConditions]
    slopes: Dict[str, float] = field(default_factory=dict)
    duality: Dict[str, dict] = field(default_factory=dict)
    variations: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def to_dict(self) -> dict:
        return {
            "conditions": [c.to_dict() for c in self.conditions],
            "slopes": self.slopes,
            "duality": self.duality,
            "variations": self.variations,
            "passed": self.passed,
        }


def _mp1_literal(frozen, first, second, ham, term, k) -> np.ndarray:
    """Quadratic-form condition at the impulse node, scalar state"""
    P, Q = second.P[:, k, 0, 0], second.Q[:, k, 0, 0]
    B_x, S_x = frozen.B_x[:, k, 0, 0], frozen.S_x[:, k, 0, 0]
    sigma = term.copy_sigma[:, k, 0]
    xi = float(term.xi[0])
    bracket = 2.0 * P * B_x - S_x * P * S_x - 2.0 * Q * S_x + 2.0 * Q * S_x * sigma
    return xi * bracket * xi + sigma * P * sigma - ham.H_x[:, k, 0] * xi - ham.H[:, k]


def _mp1_window(frozen, first, second, ham, term, nodes) -> np.ndarray:
    """Rate of the cost change per unit delay, averaged over the delay window"""
    vals = []
    xi = term.xi
    for k in nodes:
        Y, Z = first.Y[:, k], first.Z[:, k]
        St_x = frozen.S_x[:, k] - term.copy_sigma_x[:, k]
        v = _mv(St_x, np.broadcast_to(xi, Y.shape)) + term.copy_sigma[:, k]
        copy_hx = _mv(np.swapaxes(term.copy_b_x[:, k], -1, -2), Y) + _mv(np.swapaxes(term.copy_sigma_x[:, k], -1, -2), Z) + term.copy_g_x[:, k]
        copy_hxx = (np.einsum("pi,pijl->pjl", Y, term.copy_b_xx[:, k]) + np.einsum("pi,pijl->pjl", Z, term.copy_sigma_xx[:, k])
                    + term.copy_g_xx[:, k])
        copy_h = np.einsum("pi,pi->p", Y, term.copy_b[:, k]) + np.einsum("pi,pi->p", Z, term.copy_sigma[:, k]) + term.copy_g[:, k]
        Ht_x = ham.H_x[:, k] - copy_hx
        Ht_xx = ham.H_xx[:, k] - copy_hxx
        vals.append(np.einsum("pi,pij,pj->p", v, second.P[:, k], v) - Ht_x @ xi + np.einsum("i,pij,j->p", xi, Ht_xx, xi) - copy_h)
    return np.mean(vals, axis=0)


def check_mp_conditions(spec: ProblemSpec, bundle: OptimalBundle, frozen: FrozenCoefficients, first: FirstAdjoint,
                        second: SecondAdjoint, eta_grid: Optional[np.ndarray] = None, window: float = 0.025,
                        size_only: bool = False, tolerance: float = 1e-3) -> MPReport:
    """Score the maximum-principle conditions for every impulse of the optimal control"""
    nodes = bundle.grid.steps + 1
    for arr in (first.Y, second.P):
        if arr.shape[:2] != (bundle.paths, nodes) or frozen.shape != (bundle.paths, nodes):
            raise BundleMismatchError("adjoints do not match the optimal bundle")
    if eta_grid is None:
        eta_grid = cone_grid(spec.cone, 9)
    ham = hamiltonian_bundle(frozen, first, bundle)
    dt = bundle.grid.dt
    t_nodes = bundle.grid.nodes
    conditions = []
    for term in frozen.impulses:
        k = term.node
        case = designate_case(bundle.control, term.index, spec.horizon)

        tail = (t_nodes[:-1] >= term.tau - 1e-12).astype(float) * dt
        M = frozen.H_x + term.ell_xi + np.einsum("pki,k->pi", ham.H_x[:, :-1], tail)
        literal = frozen.H_x + term.ell_xi + np.einsum("pki,k->pi", frozen.G_x[:, :-1], tail)
        mp2: Dict[float, mc_stats.Estimate] = {}
        mp2_literal: Dict[float, mc_stats.Estimate] = {}
        for eta in eta_grid:
            direction = np.asarray(eta, dtype=float) - term.xi
            key = float(eta[0]) if len(eta) == 1 else float(np.linalg.norm(eta))
            mp2[key] = mc_stats.estimate(M @ direction)
            mp2_literal[key] = mc_stats.estimate(literal @ direction)
        worst = min(mp2.values(), key=lambda e: e.mean)
        scale = float(np.linalg.norm(M.mean(axis=0))) * max(float(np.linalg.norm(np.asarray(e, dtype=float) - term.xi)) for e in eta_grid)
        mp2_passed = _lower_pass(worst, scale, tolerance)

        S_path = (term.ell_tau + np.einsum("pi,pi->p", frozen.H_x, term.zeta[:, -1])
                  + _integral(np.einsum("pki,pki->pk", ham.H_x, term.zeta) + term.g_tau, dt))
        stat = mc_stats.estimate(S_path)
        s_scale = abs(term.ell_tau) + float(np.mean(np.abs(S_path - term.ell_tau)))
        band = 3.0 * stat.stderr + tolerance * s_scale
        if case == "initial":
            tag, stat_passed = "MP4", stat.mean >= -band
        elif case == "terminal":
            tag, stat_passed = "MP5", stat.mean <= band
        else:
            tag, stat_passed = "MP3", abs(stat.mean) <= band

        mp1 = mp1_window_est = None
        mp1_passed = None
        if spec.dim_state == 1 and not size_only:
            lit = _mp1_literal(frozen, first, second, ham, term, k)
            mp1 = mc_stats.estimate(lit)
            upper = min(term.tau + window, spec.horizon)
            win_nodes = [j for j in range(k, nodes - 1) if t_nodes[j] < upper - 1e-12] or [k]
            mp1_window_est = mc_stats.estimate(_mp1_window(frozen, first, second, ham, term, win_nodes))
            mp1_passed = _lower_pass(mp1, float(np.mean(np.abs(lit))), tolerance)
            logger.info(f"📊 impulse {term.index}: window-averaged delay rate over {len(win_nodes)} nodes "
                        f"{mp1_window_est.mean:.4e}")

        cond = ImpulseConditions(
            index=term.index, case=case, mp1=mp1, mp1_window=mp1_window_est, mp1_passed=mp1_passed,
            mp2=mp2, mp2_literal=mp2_literal, mp2_passed=mp2_passed,
            stationarity=stat, stationarity_tag=tag, stationarity_passed=stat_passed,
        )
        logger.info(f"{'✅' if cond.passed else '❌'} impulse {term.index} ({case}): MP2 min {worst.mean:.4e}, "
                    f"{tag} {stat.mean:.4e} +/- {stat.stderr:.1e}")
        conditions.append(cond)
    return MPReport(conditions=conditions)
