"""Frozen coefficient processes and regression Monte Carlo solvers for the adjoint BSDEs"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import mc_stats
from errors import BundleMismatchError, ConfigError, DerivativeInconsistencyError
from model import TIME_TOL, ImpulseControl, ProblemSpec, derivative_errors, impulse_derivative_errors
from qvi import _cfl_substeps, _coefficients, _operator
from simulate import BrownianGrid, TimeGrid, Trajectory, make_noise, make_time_grid, simulate_state

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
FP_ITERATIONS = 10
FP_TOLERANCE = 1e-10


@dataclass
class OptimalBundle:
    """Optimal pair realized on one grid and one noise bundle (stacking semantics)"""
    spec: ProblemSpec
    control: ImpulseControl
    x0: np.ndarray
    grid: TimeGrid
    noise: BrownianGrid
    trajectory: Trajectory

    @property
    def paths(self) -> int:
        return self.noise.paths


def make_optimal_bundle(spec: ProblemSpec, control: ImpulseControl, x0, paths: int, base_steps: int, seed: int,
                        extra_times: Sequence[float] = ()) -> OptimalBundle:
    stacked = spec.with_semantics("stacking")
    grid = make_time_grid(control.start_time, spec.horizon, control, base_steps, extra_times)
    noise = make_noise(grid, paths, seed)
    x0 = np.asarray(x0, dtype=float).reshape(spec.dim_state)
    trajectory = simulate_state(stacked, control, x0, grid, noise)
    logger.info(f"📊 optimal bundle: {paths} paths, {grid.steps} steps, {control.kappa} impulses")
    return OptimalBundle(spec=stacked, control=control, x0=x0, grid=grid, noise=noise, trajectory=trajectory)


@dataclass
class ImpulseTerms:
    """Copy-i quantities along the optimal state.

    The tau-derivative fields carry the indicator of [tau_i, T]; the plain
    copy values and their x-derivatives are unmasked so perturbation windows
    on either side of tau_i can read them.
    """
    index: int
    tau: float
    xi: np.ndarray
    node: int
    b_tau: np.ndarray
    sigma_tau: np.ndarray
    g_tau: np.ndarray
    copy_b: np.ndarray
    copy_sigma: np.ndarray
    copy_g: np.ndarray
    copy_b_x: np.ndarray
    copy_sigma_x: np.ndarray
    copy_g_x: np.ndarray
    copy_b_xx: np.ndarray
    copy_sigma_xx: np.ndarray
    copy_g_xx: np.ndarray
    ell_tau: float
    ell_xi: np.ndarray
    zeta: np.ndarray


@dataclass
class FrozenCoefficients:
    """Indicator-summed derivatives along X-bar; second derivatives carry the factor 1/2"""
    B: np.ndarray        # (P, K+1, n)
    S: np.ndarray
    G: np.ndarray        # (P, K+1)
    B_x: np.ndarray      # (P, K+1, n, n)
    S_x: np.ndarray
    B_xx: np.ndarray     # (P, K+1, n, n, n)
    S_xx: np.ndarray
    G_x: np.ndarray      # (P, K+1, n)
    G_xx: np.ndarray     # (P, K+1, n, n)
    H_x: np.ndarray      # (P, n)
    H_xx: np.ndarray     # (P, n, n)
    impulses: List[ImpulseTerms]
    fd_errors: Dict[str, float] = field(default_factory=dict)

    @property
    def shape(self):
        return self.G.shape


def _copy_masks(activation: np.ndarray, t: float):
    """(tau, on) per stacked copy at time t; column 0 is always on"""
    base = activation[:, 0]
    out = [(base, np.ones(len(base), dtype=bool))]
    for c in range(1, activation.shape[1]):
        taus = activation[:, c]
        on = ~np.isnan(taus) & (np.nan_to_num(taus, nan=np.inf) <= t + TIME_TOL)
        if on.any():
            out.append((np.where(on, taus, base), on))
    return out


def _summed(method, masks, t: float, x: np.ndarray) -> np.ndarray:
    total = None
    for taus, on in masks:
        val = method(taus, t, x)
        val = np.where(on.reshape(on.shape + (1,) * (val.ndim - 1)), val, 0.0)
        total = val if total is None else total + val
    return total


def _fd_check(spec: ProblemSpec, bundle: OptimalBundle, rtol: float, step: float) -> Dict[str, float]:
    traj = bundle.trajectory
    rows = slice(0, min(32, bundle.paths))
    nodes = np.unique(np.linspace(0, bundle.grid.steps, 5).astype(int))
    taus = [spec.tau0] + list(bundle.control.times)
    worst: Dict[str, float] = {}
    families = [spec.drift, spec.diffusion, spec.running_cost, spec.terminal_cost]
    for fam in families:
        for tau in taus:
            for k in nodes:
                errs = derivative_errors(fam, tau, bundle.grid.nodes[k], traj.post[rows, k], step)
                for which, err in errs.items():
                    key = f"{fam.name}.{which}"
                    worst[key] = max(worst.get(key, 0.0), err)
                    if err > rtol:
                        raise DerivativeInconsistencyError(fam.name, which, err)
    if bundle.control.kappa:
        sizes = bundle.control.size_array(spec.dim_state)
        errs = impulse_derivative_errors(spec.impulse_cost, np.asarray(bundle.control.times), sizes, step)
        for which, err in errs.items():
            worst[f"impulse_cost.{which}"] = err
            if err > rtol:
                raise DerivativeInconsistencyError("impulse_cost", which, err)
    return worst


def compute_frozen(spec: ProblemSpec, bundle: OptimalBundle, fd_check: bool = True, rtol: float = 1e-4, step: float = 1e-5) -> FrozenCoefficients:
    """Derivative processes of the optimal pair, summed over the copies active at each node"""
    traj = bundle.trajectory
    grid = bundle.grid
    P, nodes, n = traj.post.shape
    if P != bundle.paths or nodes != grid.steps + 1:
        raise BundleMismatchError("trajectory does not match the bundle grid and noise")
    fd_errors = _fd_check(spec, bundle, rtol, step) if fd_check else {}

    B = np.empty((P, nodes, n))
    S = np.empty((P, nodes, n))
    G = np.empty((P, nodes))
    B_x = np.empty((P, nodes, n, n))
    S_x = np.empty((P, nodes, n, n))
    B_xx = np.empty((P, nodes, n, n, n))
    S_xx = np.empty((P, nodes, n, n, n))
    G_x = np.empty((P, nodes, n))
    G_xx = np.empty((P, nodes, n, n))
    for k in range(nodes):
        t = grid.nodes[k]
        x = traj.post[:, k]
        masks = _copy_masks(traj.activation, t)
        B[:, k] = _summed(spec.drift.value, masks, t, x)
        S[:, k] = _summed(spec.diffusion.value, masks, t, x)
        G[:, k] = _summed(spec.running_cost.value, masks, t, x)
        B_x[:, k] = _summed(spec.drift.jacobian, masks, t, x)
        S_x[:, k] = _summed(spec.diffusion.jacobian, masks, t, x)
        B_xx[:, k] = 0.5 * _summed(spec.drift.hessian, masks, t, x)
        S_xx[:, k] = 0.5 * _summed(spec.diffusion.hessian, masks, t, x)
        G_x[:, k] = _summed(spec.running_cost.jacobian, masks, t, x)
        G_xx[:, k] = 0.5 * _summed(spec.running_cost.hessian, masks, t, x)

    x_T = traj.post[:, -1]
    H_x = spec.terminal_cost.jacobian(spec.tau0, grid.end, x_T)
    H_xx = 0.5 * spec.terminal_cost.hessian(spec.tau0, grid.end, x_T)

    impulses = []
    sizes = bundle.control.size_array(n)
    for i, tau_i in enumerate(bundle.control.times, start=1):
        node = grid.index_of(tau_i)
        after = (grid.nodes >= tau_i - TIME_TOL)[None, :]
        fields = {name: np.empty((P, nodes) + shape) for name, shape in (
            ("b_tau", (n,)), ("sigma_tau", (n,)), ("g_tau", ()),
            ("copy_b", (n,)), ("copy_sigma", (n,)), ("copy_g", ()),
            ("copy_b_x", (n, n)), ("copy_sigma_x", (n, n)), ("copy_g_x", (n,)),
            ("copy_b_xx", (n, n, n)), ("copy_sigma_xx", (n, n, n)), ("copy_g_xx", (n, n)),
        )}
        for k in range(nodes):
            t = grid.nodes[k]
            x = traj.post[:, k]
            fields["b_tau"][:, k] = spec.drift.tau_derivative(tau_i, t, x)
            fields["sigma_tau"][:, k] = spec.diffusion.tau_derivative(tau_i, t, x)
            fields["g_tau"][:, k] = spec.running_cost.tau_derivative(tau_i, t, x)
            fields["copy_b"][:, k] = spec.drift.value(tau_i, t, x)
            fields["copy_sigma"][:, k] = spec.diffusion.value(tau_i, t, x)
            fields["copy_g"][:, k] = spec.running_cost.value(tau_i, t, x)
            fields["copy_b_x"][:, k] = spec.drift.jacobian(tau_i, t, x)
            fields["copy_sigma_x"][:, k] = spec.diffusion.jacobian(tau_i, t, x)
            fields["copy_g_x"][:, k] = spec.running_cost.jacobian(tau_i, t, x)
            fields["copy_b_xx"][:, k] = 0.5 * spec.drift.hessian(tau_i, t, x)
            fields["copy_sigma_xx"][:, k] = 0.5 * spec.diffusion.hessian(tau_i, t, x)
            fields["copy_g_xx"][:, k] = 0.5 * spec.running_cost.hessian(tau_i, t, x)
        fields["b_tau"] *= after[..., None]
        fields["sigma_tau"] *= after[..., None]
        fields["g_tau"] *= after
        xi = sizes[i - 1]
        impulses.append(ImpulseTerms(
            index=i,
            tau=float(tau_i),
            xi=xi,
            node=node,
            ell_tau=float(spec.impulse_cost.tau_derivative(tau_i, xi)),
            ell_xi=np.asarray(spec.impulse_cost.xi_gradient(tau_i, xi), dtype=float),
            zeta=np.zeros((P, nodes, n)),
            **fields,
        ))

    frozen = FrozenCoefficients(B=B, S=S, G=G, B_x=B_x, S_x=S_x, B_xx=B_xx, S_xx=S_xx, G_x=G_x, G_xx=G_xx,
                                H_x=H_x, H_xx=H_xx, impulses=impulses, fd_errors=fd_errors)
    compute_zeta(frozen, bundle.noise, grid)
    return frozen


def compute_zeta(frozen: FrozenCoefficients, noise: BrownianGrid, grid: TimeGrid) -> List[np.ndarray]:
    """zeta_i(s) = int b_tau dtheta + int sigma_tau dW, Euler on the bundle noise"""
    if noise.increments.shape != (frozen.shape[0], grid.steps):
        raise BundleMismatchError("noise increments do not match the frozen coefficients")
    dt = grid.dt
    dW = noise.increments
    for term in frozen.impulses:
        zeta = term.zeta
        zeta[:, 0] = 0.0
        for k in range(grid.steps):
            zeta[:, k + 1] = zeta[:, k] + term.b_tau[:, k] * dt[k] + term.sigma_tau[:, k] * dW[:, k, None]
    return [term.zeta for term in frozen.impulses]


# -- regression ------------------------------------------------------------

class Regressor:
    """Least-squares projection on a standardized polynomial basis of the state"""

    def __init__(self, x: np.ndarray, degree: int, counts: Optional[np.ndarray] = None):
        self.degree = degree
        self.design = self._build(x, counts, degree)
        while degree > 0 and np.linalg.cond(self.design) > COND_LIMIT:
            degree -= 1
            logger.warning(f"⚠️ ill-conditioned regression basis, reducing degree to {degree}")
            self.design = self._build(x, counts, degree)
        self.degree = degree
        self._pinv = np.linalg.pinv(self.design)

    @staticmethod
    def _build(x: np.ndarray, counts: Optional[np.ndarray], degree: int) -> np.ndarray:
        P = x.shape[0]
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        u = (x[:, keep] - mu[keep]) / sd[keep]
        cols = [np.ones(P)]
        for d in range(1, degree + 1):
            for combo in itertools.combinations_with_replacement(range(u.shape[1]), d):
                cols.append(np.prod(u[:, list(combo)], axis=1))
        if counts is not None:
            levels = np.unique(counts)
            for level in levels[1:]:
                cols.append((counts == level).astype(float))
        return np.column_stack(cols)

    def coefficients(self, target: np.ndarray) -> np.ndarray:
        return self._pinv @ target.reshape(target.shape[0], -1)

    def project(self, target: np.ndarray) -> np.ndarray:
        return (self.design @ self.coefficients(target)).reshape(target.shape)


def cv_residual_variance(x: np.ndarray, target: np.ndarray, degree: int, counts: Optional[np.ndarray] = None) -> float:
    """Two-fold cross-validated mean squared residual of a basis regression"""
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float).reshape(x.shape[0], -1)
    design = Regressor._build(x, counts, degree)
    folds = [np.arange(0, len(x), 2), np.arange(1, len(x), 2)]
    total = 0.0
    for fit_rows, test_rows in (folds, folds[::-1]):
        coef, *_ = np.linalg.lstsq(design[fit_rows], target[fit_rows], rcond=None)
        total += float(np.sum((design[test_rows] @ coef - target[test_rows]) ** 2))
    return total / target.size


def _regressor(bundle: OptimalBundle, k: int, degree: int) -> Regressor:
    counts = bundle.trajectory.active_count[:, k]
    return Regressor(bundle.trajectory.post[:, k], degree, counts if np.ptp(counts) > 0 else None)


def _check_pair(frozen: FrozenCoefficients, bundle: OptimalBundle):
    if frozen.shape != (bundle.paths, bundle.grid.steps + 1):
        raise BundleMismatchError(f"frozen coefficients {frozen.shape} do not match the bundle")
    if bundle.paths < 1000:
        raise ConfigError("adjoint regressions need at least 1000 paths")


@dataclass
class FirstAdjoint:
    Y: np.ndarray  # (P, K+1, n)
    Z: np.ndarray
    y_coefficients: List[np.ndarray]
    z_coefficients: List[np.ndarray]
    degrees: List[int]
    cv_variance: np.ndarray  # per node, Y regression


@dataclass
class SecondAdjoint:
    P: np.ndarray  # (paths, K+1, n, n)
    Q: np.ndarray
    p_coefficients: List[np.ndarray]
    q_coefficients: List[np.ndarray]
    degrees: List[int]


def _implicit(start: np.ndarray, update, scale_floor: float = 1.0) -> np.ndarray:
    current = start
    for _ in range(FP_ITERATIONS):
        nxt = update(current)
        change = float(np.max(np.abs(nxt - current))) if nxt.size else 0.0
        current = nxt
        if change <= FP_TOLERANCE * max(scale_floor, float(np.max(np.abs(current)))):
            break
    return current


def solve_first_adjoint(frozen: FrozenCoefficients, bundle: OptimalBundle, basis_degree: int = 3) -> FirstAdjoint:
    """dY = -(B_x'Y + S_x'Z + G_x) ds + Z dW, Y(T) = H_x, by backward regression"""
    _check_pair(frozen, bundle)
    grid = bundle.grid
    K = grid.steps
    dt, dW = grid.dt, bundle.noise.increments
    paths, _, n = frozen.G_x.shape
    Y = np.empty((paths, K + 1, n))
    Z = np.zeros((paths, K + 1, n))
    Y[:, K] = frozen.H_x
    y_coef: List[np.ndarray] = [None] * (K + 1)
    z_coef: List[np.ndarray] = [None] * (K + 1)
    degrees = [basis_degree] * (K + 1)
    cv = np.zeros(K + 1)
    for k in range(K - 1, -1, -1):
        reg = _regressor(bundle, k, basis_degree)
        degrees[k] = reg.degree
        nxt = Y[:, k + 1]
        z_target = nxt * (dW[:, k, None] / dt[k])
        Z[:, k] = reg.project(z_target)
        z_coef[k] = reg.coefficients(z_target)
        zk = Z[:, k]
        B_x, S_x, G_x = frozen.B_x[:, k], frozen.S_x[:, k], frozen.G_x[:, k]

        def target(y):
            driver = np.einsum("pji,pj->pi", B_x, y) + np.einsum("pji,pj->pi", S_x, zk) + G_x
            return nxt + driver * dt[k]

        Y[:, k] = _implicit(reg.project(nxt), lambda y: reg.project(target(y)))
        y_coef[k] = reg.coefficients(target(Y[:, k]))
        cv[k] = cv_residual_variance(bundle.trajectory.post[:, k], target(Y[:, k]), reg.degree)
    logger.info(f"✅ first adjoint solved on {K} steps, Y(t) mean {np.mean(Y[:, 0], axis=0).tolist()}")
    return FirstAdjoint(Y=Y, Z=Z, y_coefficients=y_coef, z_coefficients=z_coef, degrees=degrees, cv_variance=cv)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def hamiltonian_xx(frozen: FrozenCoefficients, first: FirstAdjoint) -> np.ndarray:
    return (np.einsum("pki,pkijl->pkjl", first.Y, frozen.B_xx)
            + np.einsum("pki,pkijl->pkjl", first.Z, frozen.S_xx)
            + frozen.G_xx)


def solve_second_adjoint(frozen: FrozenCoefficients, first: FirstAdjoint, bundle: OptimalBundle, basis_degree: int = 3) -> SecondAdjoint:
    """dP = -(P B_x + B_x'P + S_x'P S_x + Q S_x + S_x'Q + Hxx) ds + Q dW, P(T) = H_xx"""
    _check_pair(frozen, bundle)
    if first.Y.shape[:2] != frozen.shape:
        raise BundleMismatchError("first adjoint does not match the frozen coefficients")
    grid = bundle.grid
    K = grid.steps
    dt, dW = grid.dt, bundle.noise.increments
    paths, _, n = frozen.G_x.shape
    Hxx = hamiltonian_xx(frozen, first)
    Pm = np.empty((paths, K + 1, n, n))
    Qm = np.zeros((paths, K + 1, n, n))
    Pm[:, K] = frozen.H_xx
    p_coef: List[np.ndarray] = [None] * (K + 1)
    q_coef: List[np.ndarray] = [None] * (K + 1)
    degrees = [basis_degree] * (K + 1)
    for k in range(K - 1, -1, -1):
        reg = _regressor(bundle, k, basis_degree)
        degrees[k] = reg.degree
        nxt = Pm[:, k + 1]
        q_target = nxt * (dW[:, k, None, None] / dt[k])
        Qm[:, k] = _sym(reg.project(q_target))
        q_coef[k] = reg.coefficients(q_target)
        qk = Qm[:, k]
        B_x, S_x, hxx = frozen.B_x[:, k], frozen.S_x[:, k], Hxx[:, k]
        S_xT = np.swapaxes(S_x, -1, -2)

        def target(p):
            driver = (p @ B_x + np.swapaxes(B_x, -1, -2) @ p + S_xT @ p @ S_x
                      + qk @ S_x + S_xT @ qk + hxx)
            return nxt + driver * dt[k]

        Pm[:, k] = _sym(_implicit(reg.project(nxt), lambda p: _sym(reg.project(target(p)))))
        p_coef[k] = reg.coefficients(target(Pm[:, k]))
    logger.info(f"✅ second adjoint solved on {K} steps")
    return SecondAdjoint(P=Pm, Q=Qm, p_coefficients=p_coef, q_coefficients=q_coef, degrees=degrees)


@dataclass
class HamiltonianPath:
    H: np.ndarray     # (P, K+1)
    H_x: np.ndarray   # (P, K+1, n)
    H_xx: np.ndarray  # (P, K+1, n, n)


def hamiltonian_bundle(frozen: FrozenCoefficients, first: FirstAdjoint, bundle: OptimalBundle) -> HamiltonianPath:
    """Sum over active copies of y'b + z'sigma + g and its x-derivatives along the bundle"""
    if first.Y.shape[:2] != frozen.shape or frozen.shape[0] != bundle.paths:
        raise BundleMismatchError("adjoint and frozen coefficients come from different bundles")
    Y, Z = first.Y, first.Z
    H = np.einsum("pki,pki->pk", Y, frozen.B) + np.einsum("pki,pki->pk", Z, frozen.S) + frozen.G
    H_x = np.einsum("pkji,pkj->pki", frozen.B_x, Y) + np.einsum("pkji,pkj->pki", frozen.S_x, Z) + frozen.G_x
    return HamiltonianPath(H=H, H_x=H_x, H_xx=hamiltonian_xx(frozen, first))


# -- Feynman-Kac companion ---------------------------------------------------

@dataclass
class FeynmanKacReport:
    max_mean_gap: float
    rms_gap: float
    worst_node: int

    def to_dict(self) -> dict:
        return {"max_mean_gap": self.max_mean_gap, "rms_gap": self.rms_gap, "worst_node": self.worst_node}


def feynman_kac_gradient(spec: ProblemSpec, bundle: OptimalBundle, nx: int = 401, pad: float = 1.0) -> np.ndarray:
    """u_x along the bundle, u solving u_t + b u_x + sigma^2/2 u_xx + g = 0, u(T) = h (n = 1, no impulses)"""
    if spec.dim_state != 1 or bundle.control.kappa:
        raise ConfigError("the Feynman-Kac companion needs n = 1 and a control without impulses")
    post = bundle.trajectory.post[:, :, 0]
    lo, hi = float(post.min()) - pad, float(post.max()) + pad
    x = np.linspace(lo, hi, nx)
    dx = x[1] - x[0]
    tau = spec.tau0
    nodes = bundle.grid.nodes
    K = len(nodes) - 1
    u = spec.terminal_cost.value(tau, spec.horizon, x[:, None])
    out = np.empty(post.shape)
    out[:, K] = np.interp(post[:, K], x, np.gradient(u, dx))
    for k in range(K - 1, -1, -1):
        step = nodes[k + 1] - nodes[k]
        b, sig2, g = _coefficients(spec, tau, nodes[k + 1], x)
        sub = _cfl_substeps(b, sig2, dx, step)
        for _ in range(sub):
            u = u + (step / sub) * _operator(u, b, sig2, g, dx)
        out[:, k] = np.interp(post[:, k], x, np.gradient(u, dx))
    return out


def feynman_kac_check(spec: ProblemSpec, first: FirstAdjoint, bundle: OptimalBundle, nx: int = 401) -> FeynmanKacReport:
    grad = feynman_kac_gradient(spec, bundle, nx)
    Y = first.Y[:, :, 0]
    gaps = np.abs(Y.mean(axis=0) - grad.mean(axis=0))
    worst = int(np.argmax(gaps))
    rms = float(np.sqrt(np.mean((Y - grad) ** 2)))
    logger.info(f"📊 Feynman-Kac companion: max mean gap {gaps[worst]:.3e} at node {worst}, rms {rms:.3e}")
    return FeynmanKacReport(max_mean_gap=float(gaps[worst]), rms_gap=rms, worst_node=worst)


def node_summary(first: FirstAdjoint, second: SecondAdjoint, grid: TimeGrid) -> List[dict]:
    """Per-node means and standard deviations of the first components"""
    rows = []
    for k, t in enumerate(grid.nodes):
        row = {"node": k, "time": float(t)}
        for name, arr in (("Y", first.Y[:, k, 0]), ("Z", first.Z[:, k, 0]),
                          ("P", second.P[:, k, 0, 0]), ("Q", second.Q[:, k, 0, 0])):
            row[f"{name}_mean"] = mc_stats.fsum_mean(arr)
            row[f"{name}_std"] = float(np.std(arr))
        rows.append(row)
    return rows
