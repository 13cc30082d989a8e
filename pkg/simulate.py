"""Euler-Maruyama simulation of the impulse-driven state and Monte Carlo cost estimates"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

import mc_stats
from errors import ConfigError, DivergenceError, ImpulseOrderError
from model import TIME_TOL, ImpulseControl, ProblemSpec

logger = logging.getLogger(__name__)

BLOWUP = 1e12
CHUNK = 2048
MIN_STEPS = 16


@dataclass(frozen=True)
class TimeGrid:
    start: float
    end: float
    nodes: np.ndarray
    base_steps: int

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    def index_of(self, time: float) -> int:
        k = int(np.argmin(np.abs(self.nodes - time)))
        if abs(self.nodes[k] - time) > 1e-9:
            raise ImpulseOrderError(f"time {time} is not a node of the grid")
        return k


def make_time_grid(t: float, T: float, control: Optional[ImpulseControl], base_steps: int, extra_times: Sequence[float] = ()) -> TimeGrid:
    """Uniform grid on [t, T] with every impulse time (and extra time) inserted as a node"""
    if not t < T:
        raise ConfigError(f"time grid needs t < T, got [{t}, {T}]")
    if base_steps < MIN_STEPS:
        raise ConfigError(f"time grid needs base_steps >= {MIN_STEPS}, got {base_steps}")
    nodes = list(np.linspace(t, T, base_steps + 1))
    wanted = list(control.times) if control is not None else []
    wanted += list(extra_times)
    for time in wanted:
        if time < t - TIME_TOL or time > T + TIME_TOL:
            raise ImpulseOrderError(f"impulse time {time} outside [{t}, {T}]")
        if min(abs(time - node) for node in nodes) > TIME_TOL:
            nodes.append(float(time))
    nodes = np.array(sorted(nodes), dtype=float)
    nodes.flags.writeable = False
    return TimeGrid(start=float(t), end=float(T), nodes=nodes, base_steps=base_steps)


@dataclass(frozen=True)
class BrownianGrid:
    increments: np.ndarray  # (paths, steps)
    seed: int
    path_ids: np.ndarray

    @property
    def paths(self) -> int:
        return self.increments.shape[0]


def brownian_increments(grid: TimeGrid, path_ids: np.ndarray, seed: int) -> np.ndarray:
    scale = np.sqrt(grid.dt)
    out = np.empty((len(path_ids), grid.steps))
    for row, pid in enumerate(path_ids):
        out[row] = mc_stats.path_rng(seed, pid).standard_normal(grid.steps) * scale
    return out


def make_noise(grid: TimeGrid, paths: int, seed: int, first_path: int = 0) -> BrownianGrid:
    ids = np.arange(first_path, first_path + paths)
    inc = brownian_increments(grid, ids, seed)
    inc.flags.writeable = False
    return BrownianGrid(increments=inc, seed=seed, path_ids=ids)


@dataclass
class Trajectory:
    """Pre- and post-impulse values per node; activation times per path (NaN = never)"""
    pre: np.ndarray  # (paths, nodes, n)
    post: np.ndarray
    activation: np.ndarray  # (paths, copies), column 0 is tau0
    active_count: np.ndarray  # (paths, nodes)
    grid: TimeGrid
    driver: BrownianGrid
    semantics: str

    def active_set(self, path: int, node: int) -> List[float]:
        t_k = self.grid.nodes[node]
        taus = self.activation[path]
        return [float(tau) for c, tau in enumerate(taus) if not np.isnan(tau) and (c == 0 or tau <= t_k + TIME_TOL)]


@dataclass
class CostEstimate:
    mean: float
    standard_error: float
    path_count: int
    running: mc_stats.Estimate
    impulse: mc_stats.Estimate
    terminal: mc_stats.Estimate
    seed: int
    per_path: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.standard_error,
            "paths": self.path_count,
            "seed": self.seed,
            "breakdown": {
                "running": self.running.mean,
                "impulse": self.impulse.mean,
                "terminal": self.terminal.mean,
            },
        }


def _stacked(fam, activation: np.ndarray, t: float, x: np.ndarray) -> np.ndarray:
    """Sum of fam(tau_c, t, x) over the copies active on each path"""
    total = fam.value(activation[:, 0], t, x)
    for c in range(1, activation.shape[1]):
        on = ~np.isnan(activation[:, c])
        if not on.any():
            continue
        val = fam.value(np.where(on, activation[:, c], activation[:, 0]), t, x)
        if on.all():
            total = total + val
        else:
            mask = on[:, None] if val.ndim == 2 else on
            total = total + np.where(mask, val, 0.0)
    return total


class _PolicyLookup:
    """Nearest-node reader for a PolicyMap slice"""

    def __init__(self, policy, tau0: float):
        self.slice = int(np.argmin(np.abs(np.asarray(policy.tau_values) - tau0)))
        self.t_nodes = np.asarray(policy.t_nodes)
        self.x_nodes = np.asarray(policy.x_nodes)
        self.intervene = policy.intervene[self.slice]
        self.sizes = policy.impulse_size[self.slice]
        self.clamped = 0

    def __call__(self, t: float, x: np.ndarray):
        ti = int(np.argmin(np.abs(self.t_nodes - t)))
        pos = x[:, 0]
        outside = (pos < self.x_nodes[0]) | (pos > self.x_nodes[-1])
        self.clamped += int(outside.sum())
        h = self.x_nodes[1] - self.x_nodes[0]
        xi = np.clip(np.rint((pos - self.x_nodes[0]) / h).astype(int), 0, len(self.x_nodes) - 1)
        return self.intervene[ti, xi], self.sizes[ti, xi]


def _march(spec: ProblemSpec, x0, grid: TimeGrid, dW: np.ndarray, control: Optional[ImpulseControl] = None, policy=None, keep_path: bool = False):
    """Integrate a block of paths; returns per-path cost parts and optionally the path"""
    n = spec.dim_state
    paths = dW.shape[0]
    K = grid.steps
    dt = grid.dt
    stacking = spec.semantics == "stacking"
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(n), (paths, n)).copy()

    jumps: Dict[int, tuple] = {}
    if control is not None:
        for tau_j, size in zip(control.times, control.sizes):
            jumps[grid.index_of(tau_j)] = (tau_j, np.asarray(size, dtype=float))
    copies = 1 + (control.kappa if control is not None else spec.max_impulses) if stacking else 1
    activation = np.full((paths, copies), np.nan)
    activation[:, 0] = spec.tau0
    counts = np.zeros(paths, dtype=int)
    cap_hit = np.zeros(paths, dtype=bool)
    lookup = _PolicyLookup(policy, spec.tau0) if policy is not None else None
    records = []

    running = np.zeros(paths)
    impulse = np.zeros(paths)
    pre_all = post_all = active_all = None
    if keep_path:
        pre_all = np.empty((paths, K + 1, n))
        post_all = np.empty((paths, K + 1, n))
        active_all = np.empty((paths, K + 1), dtype=int)

    for k in range(K + 1):
        t_k = grid.nodes[k]
        pre = x
        if k in jumps:
            tau_j, size = jumps[k]
            x = pre + size
            impulse = impulse + spec.impulse_cost.value(tau_j, size)
            if stacking:
                activation[:, counts[0] + 1] = tau_j
            counts += 1
        elif lookup is not None:
            hit, sizes = lookup(t_k, x)
            allowed = hit & (counts < spec.max_impulses)
            cap_hit |= hit & ~allowed
            if allowed.any():
                x = pre.copy()
                x[allowed] = pre[allowed] + sizes[allowed]
                impulse = impulse + np.where(allowed, spec.impulse_cost.value(t_k, sizes), 0.0)
                if stacking:
                    rows = np.nonzero(allowed)[0]
                    activation[rows, counts[rows] + 1] = t_k
                for row in np.nonzero(allowed)[0]:
                    records.append((row, k, counts[row], sizes[row].copy()))
                counts = counts + allowed
        if keep_path:
            pre_all[:, k] = pre
            post_all[:, k] = x
            active_all[:, k] = 1 + (np.sum(~np.isnan(activation[:, 1:]), axis=1) if stacking else 0)
        if k == K:
            break
        running = running + _stacked(spec.running_cost, activation, t_k, x) * dt[k]
        drift = _stacked(spec.drift, activation, t_k, x)
        diff = _stacked(spec.diffusion, activation, t_k, x)
        x = x + drift * dt[k] + diff * dW[:, k, None]
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP:
            raise DivergenceError(k + 1)

    terminal = spec.terminal_cost.value(spec.tau0, grid.end, x)
    if lookup is not None and lookup.clamped:
        logger.warning(f"⚠️ policy lookup clamped {lookup.clamped} state evaluations to the grid boundary")
    return {
        "running": running,
        "impulse": impulse,
        "terminal": terminal,
        "counts": counts,
        "cap_hit": cap_hit,
        "records": records,
        "activation": activation,
        "final": x,
        "pre": pre_all,
        "post": post_all,
        "active_count": active_all,
    }


def simulate_state(spec: ProblemSpec, control: ImpulseControl, x0, grid: TimeGrid, noise: BrownianGrid) -> Trajectory:
    if noise.increments.shape[1] != grid.steps:
        raise ConfigError("noise increments do not match the grid intervals")
    out = _march(spec, x0, grid, noise.increments, control=control, keep_path=True)
    return Trajectory(
        pre=out["pre"],
        post=out["post"],
        activation=out["activation"],
        active_count=out["active_count"],
        grid=grid,
        driver=noise,
        semantics=spec.semantics,
    )


def _chunked(spec, x0, grid, paths, seed, threads, **kwargs):
    starts = list(range(0, paths, CHUNK))

    def work(first):
        ids = np.arange(first, min(first + CHUNK, paths))
        dW = brownian_increments(grid, ids, seed)
        out = _march(spec, x0, grid, dW, **kwargs)
        out["ids"] = ids
        return out

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, starts))
    return [work(first) for first in starts]


def _estimate(parts: list, seed: int) -> CostEstimate:
    running = np.concatenate([p["running"] for p in parts])
    impulse = np.concatenate([p["impulse"] for p in parts])
    terminal = np.concatenate([p["terminal"] for p in parts])
    total = running + impulse + terminal
    comps = [mc_stats.estimate(running), mc_stats.estimate(impulse), mc_stats.estimate(terminal)]
    return CostEstimate(
        mean=math.fsum(c.mean for c in comps),
        standard_error=mc_stats.standard_error(total),
        path_count=int(total.size),
        running=comps[0],
        impulse=comps[1],
        terminal=comps[2],
        seed=seed,
        per_path=total,
    )


def estimate_cost(spec: ProblemSpec, control: ImpulseControl, x0, paths: int, base_steps: int, seed: int, threads: int = 1, extra_times: Sequence[float] = ()) -> CostEstimate:
    if paths < 100:
        raise ConfigError("estimate_cost needs at least 100 paths")
    grid = make_time_grid(control.start_time, spec.horizon, control, base_steps, extra_times)
    parts = _chunked(spec, x0, grid, paths, seed, threads, control=control)
    return _estimate(parts, seed)


def trivial_cost(spec: ProblemSpec, x0, start: float, paths: int, base_steps: int, seed: int, threads: int = 1) -> CostEstimate:
    """Cost of the control with no impulses"""
    return estimate_cost(spec, ImpulseControl(start_time=start), x0, paths, base_steps, seed, threads)


@dataclass
class PolicyEvaluation:
    cost: CostEstimate
    kappa_distribution: Dict[int, int]
    cap_reached: int
    record_path: np.ndarray
    record_node: np.ndarray
    record_ordinal: np.ndarray
    record_size: np.ndarray
    grid: TimeGrid

    def to_dict(self) -> dict:
        return {
            "cost": self.cost.to_dict(),
            "kappa_distribution": {str(k): v for k, v in sorted(self.kappa_distribution.items())},
            "cap_reached": self.cap_reached,
            "impulses": int(self.record_node.size),
        }


def evaluate_policy(spec: ProblemSpec, policy, x0, paths: int, base_steps: int, seed: int, start: float = 0.0, threads: int = 1) -> PolicyEvaluation:
    """Realize a feedback policy path by path: at most one impulse per node, capped at max_impulses"""
    if paths < 100:
        raise ConfigError("evaluate_policy needs at least 100 paths")
    grid = make_time_grid(start, spec.horizon, None, base_steps)
    parts = _chunked(spec, x0, grid, paths, seed, threads, policy=policy)
    counts = np.concatenate([p["counts"] for p in parts])
    cap = int(np.concatenate([p["cap_hit"] for p in parts]).sum())
    if cap:
        logger.warning(f"⚠️ impulse cap {spec.max_impulses} reached on {cap} paths")
    rec = [(int(p["ids"][row]), k, j, size) for p in parts for (row, k, j, size) in p["records"]]
    n = spec.dim_state
    values, freq = np.unique(counts, return_counts=True)
    return PolicyEvaluation(
        cost=_estimate(parts, seed),
        kappa_distribution={int(v): int(f) for v, f in zip(values, freq)},
        cap_reached=cap,
        record_path=np.array([r[0] for r in rec], dtype=int),
        record_node=np.array([r[1] for r in rec], dtype=int),
        record_ordinal=np.array([r[2] for r in rec], dtype=int),
        record_size=np.array([r[3] for r in rec], dtype=float).reshape(-1, n),
        grid=grid,
    )


def continuity_probe(spec: ProblemSpec, control: ImpulseControl, x0, x0_other, tau0: float, tau0_other: float, paths: int, base_steps: int, seed: int, powers=(2, 4)) -> Dict[int, mc_stats.Estimate]:
    """E sup_k |X_k - X'_k|^p on common noise for two initial data"""
    grid = make_time_grid(control.start_time, spec.horizon, control, base_steps)
    noise = make_noise(grid, paths, seed)
    a = simulate_state(replace(spec, tau0=tau0), control, x0, grid, noise)
    b = simulate_state(replace(spec, tau0=tau0_other), control, x0_other, grid, noise)
    gap = np.maximum(
        np.max(np.linalg.norm(a.pre - b.pre, axis=2), axis=1),
        np.max(np.linalg.norm(a.post - b.post, axis=2), axis=1),
    )
    return {p: mc_stats.estimate(gap ** p) for p in powers}


def moment_bound(spec: ProblemSpec, control: ImpulseControl, x0, p: int, paths: int, base_steps: int, seed: int) -> mc_stats.Estimate:
    grid = make_time_grid(control.start_time, spec.horizon, control, base_steps)
    traj = simulate_state(spec, control, x0, grid, make_noise(grid, paths, seed))
    sup = np.max(np.linalg.norm(traj.post, axis=2), axis=1)
    return mc_stats.estimate(sup ** p)


def semantics_gap(spec: ProblemSpec, control: ImpulseControl, x0, paths: int, base_steps: int, seed: int) -> mc_stats.Estimate:
    """Stacking minus frozen cost of the same control on common noise"""
    stack = estimate_cost(spec.with_semantics("stacking"), control, x0, paths, base_steps, seed)
    frozen = estimate_cost(spec.with_semantics("frozen"), control, x0, paths, base_steps, seed)
    return mc_stats.difference(stack.per_path, frozen.per_path)
