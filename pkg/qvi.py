"""Finite-difference solver for the tau-parameterized HJB quasi-variational inequality (n = 1)"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

import mc_stats
from errors import ConfigError, FixedPointError
from model import ImpulseControl, ProblemSpec, cone_grid, normalize_control
from simulate import PolicyEvaluation, _march, estimate_cost, make_noise, make_time_grid

logger = logging.getLogger(__name__)

LAMBDAS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class SolveGrid:
    """Common t grid on [0, T] shared by every tau slice; nodes with t < tau are marked invalid"""
    tau_values: np.ndarray
    t_nodes: np.ndarray
    x_nodes: np.ndarray
    boundary_margin: int = 10
    per_ray: int = 101

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    def valid(self) -> np.ndarray:
        """(slices, nt) mask of nodes with t >= tau"""
        return self.t_nodes[None, :] >= self.tau_values[:, None] - 1e-12

    def interior(self) -> slice:
        return slice(self.boundary_margin, len(self.x_nodes) - self.boundary_margin)


def make_solve_grid(spec: ProblemSpec, nx: int = 200, nt: int = 200, x_min: float = -math.pi, x_max: float = math.pi,
                    tau_values: Optional[Sequence[float]] = None, boundary_margin: int = 10, per_ray: int = 101) -> SolveGrid:
    if spec.dim_state != 1:
        raise ConfigError("the QVI solver handles dim_state = 1 only")
    if nx < 32 or nt < 32:
        raise ConfigError("QVI grids need at least 32 nodes in t and x")
    if not x_min < x_max:
        raise ConfigError("x_min must be below x_max")
    T = spec.horizon
    if tau_values is None:
        taus = list(np.linspace(0.0, 0.8 * T, 5))
        nearest = int(np.argmin([abs(v - spec.tau0) for v in taus]))
        taus[nearest] = spec.tau0
    else:
        taus = [float(v) for v in tau_values]
        if spec.tau0 not in taus:
            taus.append(spec.tau0)
    if any(v < 0 or v > T for v in taus):
        raise ConfigError("tau_values must lie in [0, T]")
    return SolveGrid(
        tau_values=np.array(sorted(set(taus))),
        t_nodes=np.linspace(0.0, T, nt),
        x_nodes=np.linspace(x_min, x_max, nx),
        boundary_margin=boundary_margin,
        per_ray=per_ray,
    )


@dataclass
class SolverSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50
    threads: int = 1


@dataclass
class ValueFunction:
    values: np.ndarray  # (slices, nt, nx)
    obstacle: np.ndarray  # N[V] on the same nodes
    grid: SolveGrid
    substeps: List[int] = field(default_factory=list)

    def slice_index(self, tau: float) -> int:
        return int(np.argmin(np.abs(self.grid.tau_values - tau)))

    def bound(self, spec: ProblemSpec) -> float:
        """T sup g + sup h over the grid"""
        x = self.grid.x_nodes[:, None]
        worst = 0.0
        for tau in self.grid.tau_values:
            g = np.max(np.abs(spec.running_cost.value(tau, 0.0, x)))
            h = np.max(np.abs(spec.terminal_cost.value(tau, spec.horizon, x)))
            worst = max(worst, spec.horizon * g + h)
        return float(worst)


@dataclass
class PolicyMap:
    intervene: np.ndarray  # (slices, nt, nx) bool
    impulse_size: np.ndarray  # (slices, nt, nx, 1), zero where no intervention
    tau_values: np.ndarray
    t_nodes: np.ndarray
    x_nodes: np.ndarray

    @property
    def region_size(self) -> int:
        return int(self.intervene.sum())


def intervention_operator(V_slice: np.ndarray, t: float, spec: ProblemSpec, xi_grid: np.ndarray, x_nodes: np.ndarray):
    """N[V](x) = min over the lattice of V(x + xi) + l(t, xi), clamped interpolation; returns (N, argmin index)"""
    shifts = xi_grid[:, 0]
    cost = spec.impulse_cost.value(t, xi_grid)
    candidates = np.interp(x_nodes[None, :] + shifts[:, None], x_nodes, V_slice) + cost[:, None]
    best = np.argmin(candidates, axis=0)
    return candidates[best, np.arange(len(x_nodes))], best


def _coefficients(spec: ProblemSpec, tau: float, t: float, x_nodes: np.ndarray):
    x = x_nodes[:, None]
    b = spec.drift.value(tau, t, x)[:, 0]
    sig = spec.diffusion.value(tau, t, x)[:, 0]
    g = spec.running_cost.value(tau, t, x)
    return b, sig * sig, g


def _operator(u: np.ndarray, b: np.ndarray, sig2: np.ndarray, g: np.ndarray, dx: float) -> np.ndarray:
    """b u_x (upwind) + sigma^2/2 u_xx + g with mirrored boundaries"""
    padded = np.concatenate(([u[1]], u, [u[-2]]))
    fwd = (padded[2:] - u) / dx
    bwd = (u - padded[:-2]) / dx
    d2 = (padded[2:] - 2.0 * u + padded[:-2]) / (dx * dx)
    return np.maximum(b, 0.0) * fwd + np.minimum(b, 0.0) * bwd + 0.5 * sig2 * d2 + g


def _cfl_substeps(b, sig2, dx: float, dt: float) -> int:
    denom = float(np.max(sig2) + np.max(np.abs(b)) * dx)
    if denom <= 0:
        return 1
    return max(1, int(math.ceil(dt / (dx * dx / denom) - 1e-12)))


def _solve_slice(spec: ProblemSpec, grid: SolveGrid, index: int, xi_grid: np.ndarray, settings: SolverSettings):
    tau = float(grid.tau_values[index])
    x, t_nodes = grid.x_nodes, grid.t_nodes
    nt, nx = len(t_nodes), len(x)
    dx = grid.dx
    V = np.empty((nt, nx))
    N = np.empty((nt, nx))
    intervene = np.zeros((nt, nx), dtype=bool)
    sizes = np.zeros((nt, nx, 1))

    h = spec.terminal_cost.value(tau, spec.horizon, x[:, None])
    N_T, idx = intervention_operator(h, t_nodes[-1], spec, xi_grid, x)
    V[-1] = np.minimum(h, N_T)
    N[-1] = N_T
    intervene[-1] = N_T < h
    sizes[-1, intervene[-1]] = xi_grid[idx[intervene[-1]]]

    most = 1
    for j in range(nt - 2, -1, -1):
        step = t_nodes[j + 1] - t_nodes[j]
        b, sig2, g = _coefficients(spec, tau, t_nodes[j + 1], x)
        sub = _cfl_substeps(b, sig2, dx, step)
        most = max(most, sub)
        W = V[j + 1]
        for _ in range(sub):
            W = W + (step / sub) * _operator(W, b, sig2, g, dx)
        current = W
        scale = float(np.max(np.abs(W)))
        for _ in range(settings.max_iterations):
            obstacle, idx = intervention_operator(current, t_nodes[j], spec, xi_grid, x)
            updated = np.minimum(W, obstacle)
            change = float(np.max(np.abs(updated - current)))
            current = updated
            if change <= settings.tolerance * scale:
                break
        else:
            raise FixedPointError(index, j, change)
        V[j] = current
        N[j] = obstacle
        intervene[j] = obstacle < W
        sizes[j, intervene[j]] = xi_grid[idx[intervene[j]]]
    if most > 1:
        logger.warning(f"⚠️ CFL limit on slice tau={tau:g}: auto-substepping with up to {most} substeps per level")
    return V, N, intervene, sizes, most


def solve_qvi(spec: ProblemSpec, grid: SolveGrid, settings: Optional[SolverSettings] = None):
    """Backward explicit scheme with per-level obstacle fixed point; returns (ValueFunction, PolicyMap)"""
    settings = settings or SolverSettings()
    if spec.dim_state != 1:
        raise ConfigError("the QVI solver handles dim_state = 1 only")
    xi_grid = cone_grid(spec.cone, grid.per_ray)
    indices = range(len(grid.tau_values))
    if settings.threads > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            results = list(pool.map(lambda i: _solve_slice(spec, grid, i, xi_grid, settings), indices))
    else:
        results = [_solve_slice(spec, grid, i, xi_grid, settings) for i in indices]
    vf = ValueFunction(
        values=np.stack([r[0] for r in results]),
        obstacle=np.stack([r[1] for r in results]),
        grid=grid,
        substeps=[r[4] for r in results],
    )
    policy = PolicyMap(
        intervene=np.stack([r[2] for r in results]),
        impulse_size=np.stack([r[3] for r in results]),
        tau_values=grid.tau_values,
        t_nodes=grid.t_nodes,
        x_nodes=grid.x_nodes,
    )
    logger.info(f"📊 solved {len(results)} tau slices on {len(grid.t_nodes)}x{len(grid.x_nodes)} nodes; intervention nodes: {policy.region_size}")
    return vf, policy


def max_error_vs_oracle(vf: ValueFunction, oracle: Callable) -> float:
    valid = vf.grid.valid()
    worst = 0.0
    for s, tau in enumerate(vf.grid.tau_values):
        exact = oracle(tau, vf.grid.t_nodes[:, None], vf.grid.x_nodes[None, :])
        err = np.abs(vf.values[s] - exact)[valid[s]]
        if err.size:
            worst = max(worst, float(np.max(err)))
    return worst


# -- residual and checks ---------------------------------------------------

@dataclass
class ResidualReport:
    field: np.ndarray  # (slices, nt - 1, interior nx); NaN on invalid rows
    max_abs: float
    p99_abs: float
    sub_violation: float
    super_violation: float

    def to_dict(self) -> dict:
        return {
            "max_abs": self.max_abs,
            "p99_abs": self.p99_abs,
            "sub_violation": self.sub_violation,
            "super_violation": self.super_violation,
        }


def qvi_residual(vf: ValueFunction, spec: ProblemSpec) -> ResidualReport:
    """r = min{D_t V + H(tau, t, x, D_x V, D_xx V), N[V] - V} away from the boundary band"""
    grid = vf.grid
    x, t_nodes = grid.x_nodes, grid.t_nodes
    xi_grid = cone_grid(spec.cone, grid.per_ray)
    inner = grid.interior()
    valid = grid.valid()
    out = np.full((len(grid.tau_values), len(t_nodes) - 1, len(x[inner])), np.nan)
    for s, tau in enumerate(grid.tau_values):
        V = vf.values[s]
        for j in range(len(t_nodes) - 1):
            if not valid[s, j]:
                continue
            step = t_nodes[j + 1] - t_nodes[j]
            b, sig2, g = _coefficients(spec, tau, t_nodes[j + 1], x)
            r1 = (V[j + 1] - V[j]) / step + _operator(V[j + 1], b, sig2, g, grid.dx)
            N, _ = intervention_operator(V[j], t_nodes[j], spec, xi_grid, x)
            out[s, j] = np.minimum(r1, N - V[j])[inner]
    vals = out[~np.isnan(out)]
    if vals.size == 0:
        return ResidualReport(out, 0.0, 0.0, 0.0, 0.0)
    return ResidualReport(
        field=out,
        max_abs=float(np.max(np.abs(vals))),
        p99_abs=float(np.percentile(np.abs(vals), 99)),
        sub_violation=float(max(0.0, np.max(vals))),
        super_violation=float(max(0.0, -np.min(vals))),
    )


@dataclass
class DppReport:
    rows: List[dict]
    delta: float
    paths: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(r["inequality_ok"] and r["obstacle_ok"] and r["equality_ok"] is not False for r in self.rows)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "paths": self.paths, "seed": self.seed, "passed": self.passed, "points": self.rows}


def sample_continuation_points(vf: ValueFunction, count: int, seed: int, delta: float, margin: float = 1e-3):
    """Random valid (slice, t-index, x-index) triples strictly inside the continuation region"""
    grid = vf.grid
    rng = np.random.default_rng(seed)
    valid = grid.valid()
    lead = int(math.ceil(delta / (grid.t_nodes[1] - grid.t_nodes[0]) - 1e-9))
    inner = np.arange(len(grid.x_nodes))[grid.interior()]
    picks = []
    for s in range(len(grid.tau_values)):
        rows = np.nonzero(valid[s])[0]
        rows = rows[rows + lead < len(grid.t_nodes)]
        for j in rows:
            cont = inner[vf.values[s, j, inner] < vf.obstacle[s, j, inner] - margin]
            picks.extend((s, int(j), int(i)) for i in cont)
    if not picks:
        return []
    chosen = rng.choice(len(picks), size=min(count, len(picks)), replace=False)
    return [picks[c] for c in sorted(chosen)]


def check_dpp(spec: ProblemSpec, vf: ValueFunction, sample_points, delta: float, paths: int, seed: int,
              sim_steps: int = 32, abs_tol: float = 5e-3, margin: float = 1e-3) -> DppReport:
    """Monte Carlo check of V(t,x) <= E[V(t+delta, X) + int g] and of equality in the continuation region"""
    grid = vf.grid
    dt_grid = grid.t_nodes[1] - grid.t_nodes[0]
    lead = max(1, int(round(delta / dt_grid)))
    rows = []
    for s, j, i in sample_points:
        tau = float(grid.tau_values[s])
        t, x0 = float(grid.t_nodes[j]), float(grid.x_nodes[i])
        t_end = float(grid.t_nodes[min(j + lead, len(grid.t_nodes) - 1)])
        frozen = replace(spec, tau0=tau, semantics="frozen")
        sim_grid = make_time_grid(t, t_end, None, sim_steps)
        noise = make_noise(sim_grid, paths, seed + 7919 * (s * 100003 + j * 1009 + i))
        out = _march(frozen, [x0], sim_grid, noise.increments)
        x_end = out["final"][:, 0]
        future = np.interp(x_end, grid.x_nodes, vf.values[s, min(j + lead, len(grid.t_nodes) - 1)])
        est = mc_stats.estimate(future + out["running"])
        lower, upper = est.ci()
        value = float(vf.values[s, j, i])
        obstacle = float(vf.obstacle[s, j, i])
        strict = value < obstacle - margin
        row = {
            "tau": tau,
            "t": t,
            "x": x0,
            "V": value,
            "expectation": est.mean,
            "stderr": est.stderr,
            "inequality_margin": est.mean - value,
            "inequality_ok": value <= upper + abs_tol,
            "obstacle_ok": value <= obstacle + 1e-8,
            "equality_ok": (abs(value - est.mean) <= 3.0 * est.stderr + abs_tol) if strict else None,
        }
        rows.append(row)
    report = DppReport(rows=rows, delta=lead * dt_grid, paths=paths, seed=seed)
    status = "✅" if report.passed else "❌"
    logger.info(f"{status} DPP check on {len(rows)} points (delta={report.delta:.4g})")
    return report


@dataclass
class RegularityReport:
    lower: float
    upper: float
    bound: float
    holder_t: float
    lipschitz_x: float
    tau_variation: float
    tau_allowance: Optional[float]

    @property
    def passed(self) -> bool:
        ok = self.lower >= -1e-9 and self.upper <= self.bound + 1e-9
        if self.tau_allowance is not None:
            ok = ok and self.tau_variation <= self.tau_allowance
        return ok

    def to_dict(self) -> dict:
        return {
            "min_V": self.lower,
            "max_V": self.upper,
            "bound": self.bound,
            "holder_t": self.holder_t,
            "lipschitz_x": self.lipschitz_x,
            "tau_variation": self.tau_variation,
            "tau_allowance": self.tau_allowance,
            "passed": self.passed,
        }


def check_regularity(vf: ValueFunction, spec: ProblemSpec, tau_modulus: Optional[Dict[str, float]] = None, factor: float = 10.0) -> RegularityReport:
    grid = vf.grid
    valid = grid.valid()
    V = vf.values
    dt = np.diff(grid.t_nodes)
    holder = lips = 0.0
    for s in range(len(grid.tau_values)):
        rows = V[s][valid[s]]
        if rows.shape[0] > 1:
            holder = max(holder, float(np.max(np.abs(np.diff(rows, axis=0)) / np.sqrt(dt[-(rows.shape[0] - 1):, None]))))
        lips = max(lips, float(np.max(np.abs(np.diff(rows, axis=1)))) / grid.dx)
    variation = 0.0
    allowance = None
    taus = grid.tau_values
    for s in range(len(taus) - 1):
        both = valid[s] & valid[s + 1]
        if both.any():
            variation = max(variation, float(np.max(np.abs(V[s + 1][both] - V[s][both]))))
    if tau_modulus and len(taus) > 1:
        gap = float(np.max(np.diff(taus)))
        samples = sorted((float(k), v) for k, v in tau_modulus.items())
        above = [v for d, v in samples if d >= gap - 1e-12]
        omega = above[0] if above else samples[-1][1] * gap / samples[-1][0]
        allowance = factor * spec.horizon * omega
    valid_vals = np.concatenate([V[s][valid[s]].ravel() for s in range(len(taus))])
    return RegularityReport(
        lower=float(np.min(valid_vals)),
        upper=float(np.max(valid_vals)),
        bound=vf.bound(spec),
        holder_t=holder,
        lipschitz_x=lips,
        tau_variation=variation,
        tau_allowance=allowance,
    )


@dataclass
class SemiconvexityReport:
    k_required: float
    k_declared: Optional[float]
    slack: float

    @property
    def feasible(self) -> Optional[bool]:
        if self.k_declared is None:
            return None
        return self.k_required <= self.k_declared + self.slack

    def to_dict(self) -> dict:
        return {"k_required": self.k_required, "k_declared": self.k_declared, "slack": self.slack, "feasible": self.feasible}


def semiconvexity_constant(values: np.ndarray, dx: float, max_span: int = 8) -> float:
    """Smallest K with l V(x) + (1-l) V(x') - V(x_l) <= K l (1-l) |x - x'|^2 on on-grid triples.

    values is (..., nx); the last axis is x.
    """
    worst = 0.0
    nx = values.shape[-1]
    for lam in LAMBDAS:
        unit = 2 if lam == 0.5 else 4
        for span in range(unit, max_span + 1, unit):
            if span >= nx:
                break
            left = values[..., : nx - span]
            right = values[..., span:]
            offset = int(round((1.0 - lam) * span))
            mid = values[..., offset: nx - span + offset]
            gap = lam * left + (1.0 - lam) * right - mid
            k = float(np.max(gap)) / (lam * (1.0 - lam) * (span * dx) ** 2)
            worst = max(worst, k)
    return worst


def check_semiconvexity(vf: ValueFunction, k_sc: Optional[float] = None, max_span: int = 8, slack: float = 0.0) -> SemiconvexityReport:
    grid = vf.grid
    valid = grid.valid()
    inner = grid.interior()
    worst = 0.0
    for s in range(len(grid.tau_values)):
        rows = vf.values[s][valid[s]][:, inner]
        if rows.size:
            worst = max(worst, semiconvexity_constant(rows, grid.dx, max_span))
    return SemiconvexityReport(k_required=worst, k_declared=k_sc, slack=slack)


@dataclass
class DoubleImpulseReport:
    passed: bool
    violations: List[dict]
    checked: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checked": self.checked, "violations": self.violations[:50]}


def check_no_double_impulse(policy: PolicyMap, vf: ValueFunction, tolerance: float = 1e-9) -> DoubleImpulseReport:
    """Every landing point x + xi_hat must lie strictly in the continuation region"""
    violations = []
    checked = 0
    x = policy.x_nodes
    for s, j, i in zip(*np.nonzero(policy.intervene)):
        checked += 1
        y = x[i] + policy.impulse_size[s, j, i, 0]
        v = float(np.interp(y, x, vf.values[s, j]))
        n = float(np.interp(y, x, vf.obstacle[s, j]))
        if not v < n - tolerance:
            violations.append({
                "tau": float(policy.tau_values[s]),
                "t": float(policy.t_nodes[j]),
                "x": float(x[i]),
                "xi": float(policy.impulse_size[s, j, i, 0]),
                "V_landing": v,
                "N_landing": n,
            })
    if violations:
        logger.warning(f"❌ {len(violations)} landing points fall in the intervention region")
    return DoubleImpulseReport(passed=not violations, violations=violations, checked=checked)


# -- optimal pair extraction -----------------------------------------------

def extract_deterministic_control(evaluation: PolicyEvaluation, spec: ProblemSpec, start: float = 0.0, min_share: float = 0.5) -> ImpulseControl:
    """Modal intervention node per impulse ordinal, median size there"""
    paths = evaluation.cost.path_count
    raw = []
    last = -1
    ordinal = 0
    while True:
        mask = evaluation.record_ordinal == ordinal
        if mask.sum() < min_share * paths:
            break
        nodes = evaluation.record_node[mask]
        modal = int(np.bincount(nodes).argmax())
        if modal <= last:
            break
        size = np.median(evaluation.record_size[mask][nodes == modal], axis=0)
        raw.append((float(evaluation.grid.nodes[modal]), size))
        last = modal
        ordinal += 1
    control = normalize_control(raw, start, spec.cone, spec.horizon, spec.max_impulses)
    logger.info(f"📊 extracted deterministic control with {control.kappa} impulses: {control.to_dict()['impulses']}")
    return control


def refine_control(spec: ProblemSpec, control: ImpulseControl, x0, paths: int, base_steps: int, seed: int,
                   window: int = 10, sweeps: int = 2, xatol: float = 1e-4):
    """Coordinate search over impulse times (base grid nodes) and sizes on common noise, stacking semantics.

    Returns the refined control and its cost estimate.
    """
    if spec.dim_state != 1 or len(spec.cone.generators) != 1 or control.kappa == 0:
        cost = estimate_cost(spec.with_semantics("stacking"), control, x0, paths, base_steps, seed)
        return control, cost
    stacking = spec.with_semantics("stacking")
    direction = np.array(spec.cone.generators[0])
    base = make_time_grid(control.start_time, spec.horizon, None, base_steps).nodes
    times = [float(base[int(np.argmin(np.abs(base - t)))]) for t in control.times]
    weights = [float(np.dot(s, direction)) for s in control.sizes]

    def cost_of(ts, ws) -> float:
        trial = ImpulseControl(start_time=control.start_time, times=tuple(ts), sizes=tuple(tuple((w * direction).tolist()) for w in ws))
        return estimate_cost(stacking, trial, x0, paths, base_steps, seed).mean

    for _ in range(sweeps):
        for i in range(len(times)):
            k = int(np.argmin(np.abs(base - times[i])))
            lo = int(np.argmin(np.abs(base - times[i - 1]))) + 1 if i > 0 else 0
            hi = int(np.argmin(np.abs(base - times[i + 1]))) - 1 if i + 1 < len(times) else len(base) - 1
            best_t, best_c = times[i], None
            for node in range(max(lo, k - window), min(hi, k + window) + 1):
                trial_times = times[:i] + [float(base[node])] + times[i + 1:]
                c = cost_of(trial_times, weights)
                if best_c is None or c < best_c:
                    best_t, best_c = float(base[node]), c
            times[i] = best_t
            res = minimize_scalar(
                lambda w: cost_of(times, weights[:i] + [w] + weights[i + 1:]),
                bounds=(0.0, spec.cone.size_cap),
                method="bounded",
                options={"xatol": xatol},
            )
            weights[i] = float(res.x)
    refined = normalize_control([(t, w * direction) for t, w in zip(times, weights)], control.start_time, spec.cone, spec.horizon)
    cost = estimate_cost(stacking, refined, x0, paths, base_steps, seed)
    logger.info(f"✅ refined control {refined.to_dict()['impulses']} with cost {cost.mean:.6f} ± {cost.standard_error:.2e}")
    return refined, cost
