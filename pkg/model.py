"""Problem data for impulse control with changing running costs"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import nnls

from errors import (
    ConeViolationError,
    ConfigError,
    DimensionMismatchError,
    ImpulseOrderError,
    InvalidCoefficientError,
    SimultaneousImpulsesError,
)

logger = logging.getLogger(__name__)

KINDS = ("constant", "affine-in-x", "bounded-rational", "bounded-trig")
TAU_FORMS = ("none", "affine", "bounded-trig")
SEMANTICS = ("stacking", "frozen")
TIME_TOL = 1e-12
CONE_TOL = 1e-9
CHECK_TOL = 1e-9


@dataclass(frozen=True)
class TauFactor:
    """Separable parameter dependence m(tau)"""
    form: str = "none"
    params: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.form not in TAU_FORMS:
            raise ConfigError(f"unknown tau_dependence '{self.form}'")
        expected = {"none": 0, "affine": 2, "bounded-trig": 3}[self.form]
        if len(self.params) != expected:
            raise ConfigError(f"tau_dependence '{self.form}' takes {expected} params, got {len(self.params)}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def value(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.form == "none":
            return np.ones_like(tau)
        if self.form == "affine":
            p0, p1 = self.params
            return p0 + p1 * tau
        p0, p1, p2 = self.params
        return p0 + p1 * np.sin(p2 * tau)

    def derivative(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.form == "none":
            return np.zeros_like(tau)
        if self.form == "affine":
            return np.full_like(tau, self.params[1])
        _, p1, p2 = self.params
        return p1 * p2 * np.cos(p2 * tau)

    @property
    def is_constant(self) -> bool:
        return self.form == "none" or (self.form == "affine" and self.params[1] == 0.0) or (
            self.form == "bounded-trig" and (self.params[1] == 0.0 or self.params[2] == 0.0)
        )


@dataclass(frozen=True)
class CoefficientFamily:
    """Registry coefficient m(tau) * f(x).

    Vector families (drift, diffusion) return shape (..., n); scalar families
    (running and terminal cost) return shape (...). The componentwise forms
    apply r(u) to every coordinate and, for scalar output, sum the results.
    """
    name: str
    kind: str
    params: Tuple[float, ...]
    dim: int = 1
    vector: bool = False
    tau: TauFactor = field(default_factory=TauFactor)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown kind '{self.kind}'")
        params = tuple(float(p) for p in self.params)
        n = self.dim
        if self.kind == "constant":
            expected = (n, 1) if self.vector else (1,)
            if len(params) == 1 and self.vector:
                params = params * n
        elif self.kind == "affine-in-x":
            expected = (n + n * n,) if self.vector else (1 + n,)
        elif self.kind == "bounded-rational":
            expected = (3,)
        else:
            expected = (4,)
        if len(params) not in expected:
            raise ConfigError(f"{self.name}: kind '{self.kind}' expects {expected[0]} params, got {len(params)}")
        object.__setattr__(self, "params", params)

    # componentwise r(u) with first and second derivatives
    def _r(self, u):
        if self.kind == "bounded-rational":
            c0, c1, c2 = self.params
            p = c0 + c1 * u + c2 * u * u
            q = 1.0 + u * u
            dp = c1 + 2.0 * c2 * u
            dq = 2.0 * u
            num = dp * q - p * dq
            dnum = 2.0 * c2 * q - 2.0 * p
            return p / q, num / (q * q), (dnum * q - 2.0 * num * dq) / (q * q * q)
        c0, c1, c2, c3 = self.params
        cos, sin = np.cos(c2 * u), np.sin(c2 * u)
        return c0 + c1 * cos + c3 * sin, c2 * (c3 * cos - c1 * sin), -c2 * c2 * (c1 * cos + c3 * sin)

    def _base(self, x, order: int):
        x = np.asarray(x, dtype=float)
        n = self.dim
        if x.shape[-1] != n:
            raise DimensionMismatchError(f"{self.name}: expected state dimension {n}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        p = np.asarray(self.params)
        if self.kind == "constant":
            if order == 0:
                return np.broadcast_to(p if self.vector else p[0], lead + ((n,) if self.vector else ())).copy()
            shape = lead + ((n,) * (order + (1 if self.vector else 0)))
            return np.zeros(shape)
        if self.kind == "affine-in-x":
            if self.vector:
                a, A = p[:n], p[n:].reshape(n, n)
                if order == 0:
                    return a + x @ A.T
                if order == 1:
                    return np.broadcast_to(A, lead + (n, n)).copy()
                return np.zeros(lead + (n, n, n))
            a, w = p[0], p[1:]
            if order == 0:
                return a + x @ w
            if order == 1:
                return np.broadcast_to(w, lead + (n,)).copy()
            return np.zeros(lead + (n, n))
        r, dr, d2r = self._r(x)
        if order == 0:
            return r if self.vector else r.sum(axis=-1)
        eye = np.eye(n)
        if order == 1:
            return dr[..., :, None] * eye if self.vector else dr
        if self.vector:
            out = np.zeros(lead + (n, n, n))
            idx = np.arange(n)
            out[..., idx, idx, idx] = d2r
            return out
        return d2r[..., :, None] * eye

    def _scaled(self, tau, base, derivative: bool = False):
        m = self.tau.derivative(tau) if derivative else self.tau.value(tau)
        m = np.asarray(m, dtype=float)
        extra = base.ndim - m.ndim
        return m.reshape(m.shape + (1,) * extra) * base

    def value(self, tau, t, x):
        return self._scaled(tau, self._base(x, 0))

    def jacobian(self, tau, t, x):
        return self._scaled(tau, self._base(x, 1))

    def hessian(self, tau, t, x):
        return self._scaled(tau, self._base(x, 2))

    def tau_derivative(self, tau, t, x):
        return self._scaled(tau, self._base(x, 0), derivative=True)

    def checked_value(self, tau, t, x):
        """value() that raises on the first non-finite probe point"""
        out = np.asarray(self.value(tau, t, x))
        x = np.asarray(x, dtype=float)
        rows = out.reshape(x.shape[:-1] + (-1,))
        ok = np.all(np.isfinite(rows), axis=-1)
        if not np.all(ok):
            idx = np.unravel_index(int(np.argmin(ok)), ok.shape) if ok.ndim else ()
            tau_at = np.broadcast_to(np.asarray(tau, dtype=float), ok.shape)[idx]
            raise InvalidCoefficientError(self.name, {"tau": float(tau_at), "x": x[idx].tolist()})
        return out

    def scaled(self, factor: float) -> "CoefficientFamily":
        p = list(self.params)
        if self.kind == "bounded-trig":
            p[0] *= factor
            p[1] *= factor
            p[3] *= factor
        else:
            p = [v * factor for v in p]
        return replace(self, params=tuple(p))

    @property
    def x_independent(self) -> bool:
        if self.kind == "constant":
            return True
        if self.kind == "affine-in-x":
            n = self.dim
            slope = self.params[n:] if self.vector else self.params[1:]
            return all(v == 0.0 for v in slope)
        if self.kind == "bounded-rational":
            return self.params[1] == 0.0 and self.params[2] == self.params[0]
        return self.params[2] == 0.0 or (self.params[1] == 0.0 and self.params[3] == 0.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": list(self.params),
            "tau_dependence": self.tau.form,
            "tau_params": list(self.tau.params),
        }


@dataclass(frozen=True)
class ImpulseCost:
    """l(tau, xi) = scale * m(tau) * (fixed + |xi|**power)"""
    scale: float
    fixed: float = 1.0
    power: float = 1.0
    tau: TauFactor = field(default_factory=TauFactor)
    ell0: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.ell0 <= 0:
            raise ConfigError("impulse cost needs ell0 > 0")
        if not 0 < self.mu <= 1:
            raise ConfigError("impulse cost needs mu in (0, 1]")
        if self.power <= 0:
            raise ConfigError("impulse cost needs power > 0")

    def _norm(self, xi):
        return np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)

    def value(self, tau, xi):
        return self.scale * self.tau.value(tau) * (self.fixed + self._norm(xi) ** self.power)

    def tau_derivative(self, tau, xi):
        return self.scale * self.tau.derivative(tau) * (self.fixed + self._norm(xi) ** self.power)

    def xi_gradient(self, tau, xi):
        xi = np.asarray(xi, dtype=float)
        r = self._norm(xi)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, self.power * safe ** (self.power - 2.0), 0.0)
        m = np.asarray(self.scale * self.tau.value(tau), dtype=float)
        return (m * coef)[..., None] * xi

    def scaled(self, factor: float) -> "ImpulseCost":
        return replace(self, scale=self.scale * factor, ell0=self.ell0 * factor)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "fixed": self.fixed,
            "power": self.power,
            "tau_dependence": self.tau.form,
            "tau_params": list(self.tau.params),
            "ell0": self.ell0,
            "mu": self.mu,
        }


@dataclass(frozen=True)
class ConeSpec:
    dimension: int
    generators: Tuple[Tuple[float, ...], ...]
    size_cap: float = 5.0

    def __post_init__(self):
        gens = tuple(tuple(float(v) for v in g) for g in self.generators)
        if not gens:
            raise ConfigError("cone needs at least one generator")
        for g in gens:
            if len(g) != self.dimension:
                raise ConfigError(f"cone generator {g} does not have dimension {self.dimension}")
            if abs(np.linalg.norm(g) - 1.0) > CONE_TOL:
                raise ConfigError(f"cone generator {g} is not a unit vector")
        if self.size_cap <= 0:
            raise ConfigError("cone size_cap must be positive")
        object.__setattr__(self, "generators", gens)

    @property
    def matrix(self) -> np.ndarray:
        """Generators as columns, shape (n, m)"""
        return np.array(self.generators, dtype=float).T

    def to_dict(self) -> dict:
        return {"generators": [list(g) for g in self.generators], "size_cap": self.size_cap}


@dataclass(frozen=True)
class ProblemSpec:
    dim_state: int
    horizon: float
    tau0: float
    drift: CoefficientFamily
    diffusion: CoefficientFamily
    running_cost: CoefficientFamily
    terminal_cost: CoefficientFamily
    impulse_cost: ImpulseCost
    cone: ConeSpec
    semantics: str = "stacking"
    max_impulses: int = 10
    name: str = "custom"

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if not 0.0 <= self.tau0 <= self.horizon:
            raise ConfigError(f"tau0={self.tau0} outside [0, {self.horizon}]")
        if self.semantics not in SEMANTICS:
            raise ConfigError(f"unknown semantics '{self.semantics}'")
        if not 1 <= self.dim_state <= 3:
            raise ConfigError("dim_state must be 1, 2 or 3")
        for fam, vector in ((self.drift, True), (self.diffusion, True), (self.running_cost, False), (self.terminal_cost, False)):
            if fam.dim != self.dim_state or fam.vector != vector:
                raise ConfigError(f"coefficient '{fam.name}' has the wrong shape for dim_state={self.dim_state}")
        if self.cone.dimension != self.dim_state:
            raise ConfigError("cone dimension differs from dim_state")

    def with_semantics(self, semantics: str) -> "ProblemSpec":
        return replace(self, semantics=semantics)

    @property
    def tau_independent(self) -> bool:
        return all(f.tau.is_constant for f in (self.drift, self.diffusion, self.running_cost, self.terminal_cost)) and self.impulse_cost.tau.is_constant

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "problem": {
                "dim_state": self.dim_state,
                "horizon": self.horizon,
                "tau0": self.tau0,
                "semantics": self.semantics,
                "max_impulses": self.max_impulses,
            },
            "cone": self.cone.to_dict(),
            "coefficients": {"drift": self.drift.to_dict(), "diffusion": self.diffusion.to_dict()},
            "costs": {
                "running": self.running_cost.to_dict(),
                "terminal": self.terminal_cost.to_dict(),
                "impulse": self.impulse_cost.to_dict(),
            },
        }


def scale_costs(spec: ProblemSpec, factor: float) -> ProblemSpec:
    """Multiply g, h and l by the same positive factor"""
    return replace(
        spec,
        running_cost=spec.running_cost.scaled(factor),
        terminal_cost=spec.terminal_cost.scaled(factor),
        impulse_cost=spec.impulse_cost.scaled(factor),
    )


def scale_impulse_cost(spec: ProblemSpec, factor: float) -> ProblemSpec:
    return replace(spec, impulse_cost=spec.impulse_cost.scaled(factor))


def cone_contains(cone: ConeSpec, v) -> bool:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (cone.dimension,):
        raise DimensionMismatchError(f"vector of shape {v.shape} tested against a cone in R^{cone.dimension}")
    if not np.all(np.isfinite(v)):
        return False
    _, residual = nnls(cone.matrix, v)
    return bool(residual <= CONE_TOL * max(1.0, float(np.linalg.norm(v))))


def cone_grid(cone: ConeSpec, per_ray: int) -> np.ndarray:
    """Lattice of nonnegative generator combinations, ordered by (|xi|, lexicographic).

    The ordering makes the first argmin of any search over the lattice follow the
    smallest-norm-then-lexicographic tie rule.
    """
    if per_ray < 2:
        raise ConfigError("per_ray must be at least 2")
    mags = np.linspace(0.0, cone.size_cap, per_ray)
    G = cone.matrix
    weights = np.array(list(itertools.product(mags, repeat=G.shape[1])), dtype=float)
    grid = weights @ G.T
    norms = np.linalg.norm(grid, axis=1)
    keys = tuple(grid[:, k] for k in reversed(range(grid.shape[1]))) + (norms,)
    return grid[np.lexsort(keys)]


def sample_cone(cone: ConeSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(0.0, cone.size_cap, size=(count, len(cone.generators)))
    return w @ cone.matrix.T


@dataclass(frozen=True)
class ImpulseControl:
    """Ordered impulses (tau_j, xi_j) after start_time"""
    start_time: float
    times: Tuple[float, ...] = ()
    sizes: Tuple[Tuple[float, ...], ...] = ()

    @property
    def kappa(self) -> int:
        return len(self.times)

    def size_array(self, dim: int) -> np.ndarray:
        if not self.sizes:
            return np.zeros((0, dim))
        return np.array(self.sizes, dtype=float)

    def to_dict(self) -> dict:
        return {
            "start_time": self.start_time,
            "impulses": [[t, list(s)] for t, s in zip(self.times, self.sizes)],
        }


def normalize_control(
    raw: Iterable,
    t: float,
    cone: ConeSpec,
    horizon: float,
    max_impulses: Optional[int] = None,
) -> ImpulseControl:
    """Sort and validate raw (time, size) pairs into an ImpulseControl"""
    items = []
    for time, size in raw:
        time = float(time)
        vec = np.atleast_1d(np.asarray(size, dtype=float))
        if vec.shape != (cone.dimension,):
            raise DimensionMismatchError(f"impulse size {vec.tolist()} is not in R^{cone.dimension}")
        if time < t - TIME_TOL or time > horizon + TIME_TOL:
            raise ImpulseOrderError(f"impulse time {time} outside [{t}, {horizon}]")
        if not cone_contains(cone, vec):
            raise ConeViolationError(f"impulse size {vec.tolist()} at time {time} is outside the cone")
        items.append((min(max(time, t), horizon), tuple(vec.tolist())))
    items.sort(key=lambda item: item[0])
    for (a, _), (b, _) in zip(items, items[1:]):
        if b - a <= TIME_TOL:
            raise SimultaneousImpulsesError(f"two impulses at time {a}")
    if max_impulses is not None and len(items) > max_impulses:
        raise ImpulseOrderError(f"{len(items)} impulses exceed the bound {max_impulses}")
    return ImpulseControl(
        start_time=float(t),
        times=tuple(time for time, _ in items),
        sizes=tuple(size for _, size in items),
    )


# -- assumption validation -------------------------------------------------

@dataclass
class AssumptionReport:
    flags: Dict[str, bool]
    lipschitz_estimate: float
    tau_modulus: Dict[str, float]
    subadditivity_margin: float
    lower_bound_margin: float
    monotonicity_violation: float
    semiconvexity_bound: float
    derivative_errors: Dict[str, float]
    sample_count: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        return {
            "flags": dict(sorted(self.flags.items())),
            "passed": self.passed,
            "lipschitz_estimate": self.lipschitz_estimate,
            "tau_modulus": self.tau_modulus,
            "subadditivity_margin": self.subadditivity_margin,
            "lower_bound_margin": self.lower_bound_margin,
            "monotonicity_violation": self.monotonicity_violation,
            "semiconvexity_bound": self.semiconvexity_bound,
            "derivative_errors": dict(sorted(self.derivative_errors.items())),
            "sample_count": self.sample_count,
            "seed": self.seed,
        }


def derivative_errors(fam: CoefficientFamily, tau, t, x, step: float = 1e-5) -> Dict[str, float]:
    """Max relative gap between closed-form derivatives and central differences"""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    jac = fam.jacobian(tau, t, x)
    hess = fam.hessian(tau, t, x)
    errs = {"jacobian": 0.0, "hessian": 0.0}
    for a in range(n):
        e = np.zeros(n)
        e[a] = step
        fd = (fam.value(tau, t, x + e) - fam.value(tau, t, x - e)) / (2 * step)
        cf = jac[..., a]
        errs["jacobian"] = max(errs["jacobian"], float(np.max(np.abs(fd - cf) / np.maximum(1.0, np.abs(cf)))))
        fd2 = (fam.jacobian(tau, t, x + e) - fam.jacobian(tau, t, x - e)) / (2 * step)
        cf2 = hess[..., a]
        if not np.all(np.isfinite(fd2)):
            errs["hessian"] = float("inf")
            continue
        errs["hessian"] = max(errs["hessian"], float(np.max(np.abs(fd2 - cf2) / np.maximum(1.0, np.abs(cf2)))))
    tau = np.asarray(tau, dtype=float)
    fd_tau = (fam.value(tau + step, t, x) - fam.value(tau - step, t, x)) / (2 * step)
    cf_tau = fam.tau_derivative(tau, t, x)
    errs["tau"] = float(np.max(np.abs(fd_tau - cf_tau) / np.maximum(1.0, np.abs(cf_tau))))
    return errs


def impulse_derivative_errors(cost: ImpulseCost, tau, xi, step: float = 1e-5) -> Dict[str, float]:
    xi = np.asarray(xi, dtype=float)
    keep = np.linalg.norm(xi, axis=-1) > 10 * step
    tau = np.asarray(tau, dtype=float)
    fd_tau = (cost.value(tau + step, xi) - cost.value(tau - step, xi)) / (2 * step)
    cf_tau = cost.tau_derivative(tau, xi)
    errs = {"tau": float(np.max(np.abs(fd_tau - cf_tau) / np.maximum(1.0, np.abs(cf_tau))))}
    errs["xi"] = 0.0
    if np.any(keep):
        grad = cost.xi_gradient(tau[keep], xi[keep])
        for a in range(xi.shape[-1]):
            e = np.zeros(xi.shape[-1])
            e[a] = step
            fd = (cost.value(tau[keep], xi[keep] + e) - cost.value(tau[keep], xi[keep] - e)) / (2 * step)
            errs["xi"] = max(errs["xi"], float(np.max(np.abs(fd - grad[:, a]) / np.maximum(1.0, np.abs(grad[:, a])))))
    return errs


def _pair_lipschitz(fam: CoefficientFamily, tau, t, x, x2) -> float:
    diff = np.abs(np.asarray(fam.value(tau, t, x) - fam.value(tau, t, x2)))
    if diff.ndim > 1:
        diff = np.linalg.norm(diff, axis=-1)
    dist = np.linalg.norm(x - x2, axis=-1)
    return float(np.max(diff / dist))


def validate_problem(spec: ProblemSpec, sample_count: int = 1000, seed: int = 0, derivative_rtol: float = 1e-4) -> AssumptionReport:
    """Sampled checks of the standing assumptions; deterministic for a fixed seed"""
    if sample_count < 100:
        raise ConfigError("sample_count must be at least 100")
    rng = np.random.default_rng(seed)
    T, n, m = spec.horizon, spec.dim_state, sample_count
    taus = rng.uniform(0.0, T, m)
    ts = taus + rng.uniform(0.0, 1.0, m) * (T - taus)
    xs = rng.uniform(-10.0, 10.0, (m, n))
    far = rng.choice([-1e6, 1e6], size=(m, n)) * rng.uniform(0.5, 1.0, (m, n))
    families = (spec.drift, spec.diffusion, spec.running_cost, spec.terminal_cost)

    for fam in families:
        for pts in (xs, far, np.zeros((m, n))):
            fam.checked_value(taus, ts, pts)
    flags: Dict[str, bool] = {"tau0_in_range": 0.0 <= spec.tau0 <= T}

    # coefficient growth and tau continuity
    x2 = xs + rng.uniform(-0.5, 0.5, (m, n))
    k_hat = max(_pair_lipschitz(spec.drift, taus, ts, xs, x2), _pair_lipschitz(spec.diffusion, taus, ts, xs, x2))
    flags["h1_lipschitz"] = bool(np.isfinite(k_hat))
    flags["h1_bounded_at_zero"] = bool(all(np.all(np.isfinite(f.value(taus, ts, np.zeros((m, n))))) for f in families[:2]))
    modulus = {}
    for delta in (0.01, 0.05, 0.1, 0.2):
        shifted = np.minimum(taus + delta, ts)
        worst = 0.0
        for fam in families:
            gap = np.abs(np.asarray(fam.value(shifted, ts, xs) - fam.value(taus, ts, xs)))
            worst = max(worst, float(np.max(gap)))
        modulus[f"{delta:g}"] = worst
    flags["h1_tau_modulus"] = all(np.isfinite(v) for v in modulus.values())

    # cost sign, growth and impulse-cost shape
    cost = spec.impulse_cost
    xis = np.vstack([np.zeros((1, n)), sample_cone(spec.cone, m - 1, rng)])
    xis2 = sample_cone(spec.cone, m, rng)
    ell = cost.value(taus, xis)
    if not np.all(np.isfinite(ell)):
        raise InvalidCoefficientError("impulse_cost", "validation sample")
    floor_g = min(float(np.min(spec.running_cost.value(taus, ts, xs))), float(np.min(spec.running_cost.value(taus, ts, far))))
    floor_h = min(float(np.min(spec.terminal_cost.value(taus, ts, xs))), float(np.min(spec.terminal_cost.value(taus, ts, far))))
    flags["h2_nonnegative"] = floor_g >= -CHECK_TOL and floor_h >= -CHECK_TOL and float(np.min(ell)) >= -CHECK_TOL
    flags["h2_bounded"] = spec.running_cost.kind != "affine-in-x" or spec.running_cost.x_independent
    flags["h2_bounded"] = flags["h2_bounded"] and (spec.terminal_cost.kind != "affine-in-x" or spec.terminal_cost.x_independent)
    lower = float(np.min(ell - cost.ell0 * (1.0 + np.linalg.norm(xis, axis=1) ** cost.mu)))
    flags["h2_lower_bound"] = lower >= -CHECK_TOL
    later = taus + rng.uniform(0.0, 1.0, m) * (T - taus)
    mono = float(np.max(cost.value(later, xis) - ell))
    flags["h2_nonincreasing"] = mono <= CHECK_TOL
    margin = float(np.min(ell + cost.value(taus, xis2) - cost.value(taus, xis + xis2)))
    flags["h2_subadditive"] = margin > 0.0

    # semi-convexity of g, h: half the largest Hessian eigenvalue
    semi = 0.0
    for fam in (spec.running_cost, spec.terminal_cost):
        highest = float(np.max(np.linalg.eigvalsh(fam.hessian(taus, ts, xs))))
        semi = max(semi, 0.5 * highest)
    curv = [np.max(np.abs(f.hessian(taus, ts, xs))) for f in families[:2]]
    flags["h3_semiconvex"] = bool(np.isfinite(semi) and all(np.isfinite(c) for c in curv))

    # closed-form derivatives against central differences
    probe = min(m, 200)
    errs: Dict[str, float] = {}
    for fam in families:
        for key, val in derivative_errors(fam, taus[:probe], ts[:probe], xs[:probe]).items():
            errs[f"{fam.name}.{key}"] = val
    for key, val in impulse_derivative_errors(cost, taus[:probe], xis[:probe]).items():
        errs[f"impulse_cost.{key}"] = val
    flags["h4_smooth"] = all(np.isfinite(v) and v <= derivative_rtol for v in errs.values())

    report = AssumptionReport(
        flags=flags,
        lipschitz_estimate=k_hat,
        tau_modulus=modulus,
        subadditivity_margin=margin,
        lower_bound_margin=lower,
        monotonicity_violation=max(0.0, mono),
        semiconvexity_bound=semi,
        derivative_errors=errs,
        sample_count=m,
        seed=seed,
    )
    failed = [k for k, v in flags.items() if not v]
    if failed:
        logger.warning(f"⚠️ {spec.name}: assumption checks failed: {', '.join(sorted(failed))}")
    else:
        logger.info(f"✅ {spec.name}: all assumption checks passed (K̂={k_hat:.3g}, margin={margin:.3g})")
    return report
