"""Command-line orchestration: one subcommand per pipeline, artifacts under --out"""

import argparse
import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

import artifacts
import mc_stats
from adjoint import compute_frozen, feynman_kac_check, make_optimal_bundle, node_summary, solve_first_adjoint, solve_second_adjoint
from config import RunConfig, load_run_config, resolve_problem
from errors import (
    BundleMismatchError,
    ConfigError,
    DerivativeInconsistencyError,
    DivergenceError,
    FixedPointError,
    ImpulseToolkitError,
    MissingArtifactError,
    OrderCheckInconclusiveError,
    UnknownPresetError,
)
from maxprin import (
    Perturbation,
    check_expansion_orders,
    check_mp_conditions,
    duality_first,
    duality_second,
    perturbation_times,
    simulate_variational,
    variational_inequality,
)
from model import ImpulseControl, ProblemSpec, cone_grid, normalize_control, validate_problem
from presets import Preset
from qvi import (
    SolverSettings,
    check_dpp,
    check_no_double_impulse,
    check_regularity,
    check_semiconvexity,
    extract_deterministic_control,
    make_solve_grid,
    max_error_vs_oracle,
    qvi_residual,
    refine_control,
    sample_continuation_points,
    solve_qvi,
)
from simulate import estimate_cost, evaluate_policy, make_noise, make_time_grid, moment_bound, semantics_gap, simulate_state, trivial_cost

logger = logging.getLogger(__name__)

COMMANDS = ("validate", "simulate", "solve-qvi", "check-dpp", "adjoint", "check-mp", "expansion-order", "report")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_UNKNOWN_PRESET = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_ARTIFACT = 4
EXIT_NUMERICAL = 5

RESIDUAL_LIMIT = 5e-2
ORACLE_LIMIT = 2e-2
SEMICONVEXITY_SLACK = 1e-6


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--preset", help="shipped problem name")
    common.add_argument("--problem", help="TOML problem definition (overrides --preset)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--threads", type=int)
    common.add_argument("--paths", type=int)
    common.add_argument("--steps", type=int)
    parser = argparse.ArgumentParser(prog="impulse", description="Impulse control with changing running costs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


# -- shared helpers -----------------------------------------------------------

def _x0(cfg: RunConfig, spec: ProblemSpec, preset: Optional[Preset]) -> np.ndarray:
    if cfg.run.x0 is not None:
        x0 = np.asarray(cfg.run.x0, dtype=float)
    elif preset is not None:
        x0 = np.full(spec.dim_state, preset.x0)
    else:
        x0 = np.zeros(spec.dim_state)
    if x0.shape != (spec.dim_state,):
        raise ConfigError(f"x0 must have {spec.dim_state} entries")
    return x0


def _configured_control(cfg: RunConfig, spec: ProblemSpec, preset: Optional[Preset]) -> ImpulseControl:
    raw = cfg.control.impulses or (preset.control if preset is not None else ())
    return normalize_control(raw, cfg.control.start, spec.cone, spec.horizon, spec.max_impulses)


def _solve(cfg: RunConfig, spec: ProblemSpec, preset: Optional[Preset], refine: int = 1):
    lo, hi = preset.x_range if preset is not None else (-math.pi, math.pi)
    q = cfg.qvi
    grid = make_solve_grid(
        spec,
        nx=(q.nx - 1) * refine + 1,
        nt=(q.nt - 1) * refine + 1,
        x_min=q.x_min if q.x_min is not None else lo,
        x_max=q.x_max if q.x_max is not None else hi,
        tau_values=q.tau_values,
        boundary_margin=q.boundary_margin * refine,
        per_ray=q.per_ray,
    )
    settings = SolverSettings(tolerance=q.tolerance, max_iterations=q.max_iterations, threads=cfg.run.threads)
    return solve_qvi(spec, grid, settings)


def _perturbations(cfg: RunConfig, control: ImpulseControl) -> List[Perturbation]:
    mp = cfg.maxprin
    if control.kappa < mp.index:
        return []
    target = tuple(mp.target) if mp.target is not None else None
    out = [Perturbation(mp.index, eps, mp.coupling * eps, mp.direction, target) for eps in mp.epsilons]
    if mp.duality_eps > 0:
        out.append(Perturbation(mp.index, mp.duality_eps, 0.0 if mp.size_only else mp.duality_eps, mp.direction, target))
    return out


def _default_target(cfg: RunConfig, control: ImpulseControl, spec: ProblemSpec):
    if cfg.maxprin.target is not None:
        return tuple(cfg.maxprin.target)
    return tuple((2.0 * control.size_array(spec.dim_state)[cfg.maxprin.index - 1]).tolist())


def _bundle(cfg: RunConfig, spec: ProblemSpec, control: ImpulseControl, x0, extra_times):
    return make_optimal_bundle(spec, control, x0, cfg.run.paths, cfg.run.steps, cfg.run.seed, extra_times)


def _load_optimal(out: Path):
    control, x0, data = artifacts.load_control(out / artifacts.CONTROL_FILE)
    return control, x0, [float(t) for t in data.get("extra_times", [])]


# -- commands -----------------------------------------------------------------

def cmd_validate(cfg, spec, preset, out: Path) -> Tuple[List[str], bool]:
    report = validate_problem(spec, cfg.validate_.samples, cfg.run.seed, cfg.validate_.derivative_rtol)
    artifacts.write_json(out / "assumptions.json", report.to_dict())
    return ["assumptions.json"], report.passed


def cmd_simulate(cfg, spec, preset, out: Path):
    control = _configured_control(cfg, spec, preset)
    x0 = _x0(cfg, spec, preset)
    run = cfg.run
    cost = estimate_cost(spec, control, x0, run.paths, run.steps, run.seed, run.threads)
    baseline = trivial_cost(spec, x0, control.start_time, run.paths, run.steps, run.seed, run.threads)
    moment = moment_bound(spec, control, x0, cfg.simulate.moment_power, run.paths, run.steps, run.seed)
    gap = semantics_gap(spec, control, x0, run.paths, run.steps, run.seed)
    outputs = ["simulate_summary.json"]
    if cfg.simulate.dump_paths:
        grid = make_time_grid(control.start_time, spec.horizon, control, run.steps)
        traj = simulate_state(spec, control, x0, grid, make_noise(grid, cfg.simulate.dump_paths, run.seed))
        artifacts.write_csv(out / "trajectories.csv", artifacts.trajectory_header(spec.dim_state), artifacts.trajectory_rows(traj, cfg.simulate.dump_paths))
        outputs.append("trajectories.csv")
    lower, upper = mc_stats.Estimate(cost.mean, cost.standard_error, cost.path_count).ci()
    half_width = 0.5 * (upper - lower)
    checks = {
        "finite": all(math.isfinite(v) for v in (cost.mean, cost.standard_error, baseline.mean, moment.mean, gap.mean)),
        "ci_half_width": half_width <= cfg.simulate.ci_tolerance * max(1.0, abs(cost.mean)),
    }
    summary = {
        "problem": spec.name,
        "control": control.to_dict(),
        "cost": cost.to_dict(),
        "trivial_cost": baseline.to_dict(),
        "moment_bound": moment.to_dict(),
        "semantics_gap": gap.to_dict(),
        "ci_half_width": half_width,
        "checks": checks,
    }
    artifacts.write_json(out / "simulate_summary.json", summary)
    logger.info(f"📊 J = {cost.mean:.6f} ± {cost.standard_error:.2e} (no-impulse {baseline.mean:.6f})")
    return outputs, all(checks.values())


def cmd_solve_qvi(cfg, spec, preset, out: Path):
    vf, policy = _solve(cfg, spec, preset)
    residual = qvi_residual(vf, spec)
    regularity = check_regularity(vf, spec)
    semiconvex = check_semiconvexity(vf, preset.k_sc if preset is not None else None, slack=SEMICONVEXITY_SLACK)
    doubles = check_no_double_impulse(policy, vf)
    checks = {
        "residual_p99": residual.p99_abs <= RESIDUAL_LIMIT,
        "value_bounds": regularity.passed,
        "no_double_impulse": doubles.passed,
    }
    if semiconvex.feasible is not None:
        checks["semiconvexity"] = semiconvex.feasible
    summary = {
        "problem": spec.name,
        "grid": {"nx": len(vf.grid.x_nodes), "nt": len(vf.grid.t_nodes), "tau_values": vf.grid.tau_values.tolist()},
        "substeps": vf.substeps,
        "intervention_nodes": policy.region_size,
        "residual": residual.to_dict(),
        "regularity": regularity.to_dict(),
        "semiconvexity": semiconvex.to_dict(),
        "double_impulse": doubles.to_dict(),
    }
    if preset is not None and preset.oracle is not None:
        error = max_error_vs_oracle(vf, preset.oracle)
        summary["max_error_vs_closed_form"] = error
        checks["closed_form"] = error <= ORACLE_LIMIT
        if cfg.qvi.refine:
            fine, _ = _solve(cfg, spec, preset, refine=2)
            fine_error = max_error_vs_oracle(fine, preset.oracle)
            summary["refined_error_vs_closed_form"] = fine_error
            summary["refinement_ratio"] = error / fine_error if fine_error > 0 else float("inf")
            checks["refinement"] = summary["refinement_ratio"] >= 1.5
    summary["checks"] = checks
    artifacts.save_value_function(out / artifacts.VALUE_FILE, vf, policy)
    artifacts.write_csv(out / "values.csv", artifacts.value_header(spec.dim_state), artifacts.value_rows(vf, policy))
    artifacts.write_json(out / "qvi_summary.json", summary)
    return [artifacts.VALUE_FILE, "values.csv", "qvi_summary.json"], all(checks.values())


def cmd_check_dpp(cfg, spec, preset, out: Path):
    vf, _ = artifacts.load_value_function(out / artifacts.VALUE_FILE)
    d = cfg.dpp
    points = sample_continuation_points(vf, d.points, cfg.run.seed, d.delta)
    if not points:
        logger.warning("⚠️ no continuation-region points available for the DPP check")
    report = check_dpp(spec, vf, points, d.delta, d.paths or cfg.run.paths, cfg.run.seed, d.sim_steps)
    artifacts.write_json(out / "dpp_summary.json", report.to_dict())
    return ["dpp_summary.json"], report.passed


def _optimal_control(cfg, spec, preset, out: Path, x0) -> ImpulseControl:
    if cfg.adjoint.source == "control":
        return _configured_control(cfg, spec, preset)
    _, policy = artifacts.load_value_function(out / artifacts.VALUE_FILE)
    run = cfg.run
    evaluation = evaluate_policy(spec, policy, x0, run.paths, run.steps, run.seed, threads=run.threads)
    control = extract_deterministic_control(evaluation, spec, start=cfg.control.start)
    if cfg.adjoint.refine_sweeps:
        control, _ = refine_control(spec, control, x0, run.paths, run.steps, run.seed, sweeps=cfg.adjoint.refine_sweeps)
    return control


def cmd_adjoint(cfg, spec, preset, out: Path):
    x0 = _x0(cfg, spec, preset)
    control = _optimal_control(cfg, spec, preset, out, x0)
    perturbations = _perturbations(cfg, control)
    extra = perturbation_times(control, perturbations) if perturbations else []
    bundle = _bundle(cfg, spec, control, x0, extra)
    frozen = compute_frozen(spec, bundle, rtol=cfg.adjoint.fd_rtol)
    first = solve_first_adjoint(frozen, bundle, cfg.adjoint.basis_degree)
    second = solve_second_adjoint(frozen, first, bundle, cfg.adjoint.basis_degree)
    rows = node_summary(first, second, bundle.grid)
    artifacts.write_dict_rows(out / "adjoint.csv", rows)
    summary = {
        "problem": spec.name,
        "control": control.to_dict(),
        "paths": bundle.paths,
        "steps": bundle.grid.steps,
        "basis_degrees": sorted(set(first.degrees) | set(second.degrees)),
        "cv_residual_variance_mean": float(np.mean(first.cv_variance[:-1])),
        "fd_errors": frozen.fd_errors,
        "Y_start": first.Y[:, 0].mean(axis=0).tolist(),
        "P_start": second.P[:, 0].mean(axis=0).tolist(),
    }
    checks = {
        "finite": bool(all(np.all(np.isfinite(a)) for a in (first.Y, first.Z, second.P, second.Q))),
        "cv_variance_finite": bool(np.all(np.isfinite(first.cv_variance))),
    }
    if control.kappa == 0 and spec.dim_state == 1:
        fk = feynman_kac_check(spec, first, bundle)
        summary["feynman_kac"] = fk.to_dict()
        checks["feynman_kac"] = fk.max_mean_gap <= cfg.adjoint.fk_tolerance
    summary["checks"] = checks
    artifacts.write_json(out / "adjoint_summary.json", summary)
    artifacts.save_control(out / artifacts.CONTROL_FILE, control, x0, {"extra_times": extra})
    return ["adjoint.csv", "adjoint_summary.json", artifacts.CONTROL_FILE], all(checks.values())


def cmd_check_mp(cfg, spec, preset, out: Path):
    control, x0, extra = _load_optimal(out)
    bundle = _bundle(cfg, spec, control, x0, extra)
    frozen = compute_frozen(spec, bundle, rtol=cfg.adjoint.fd_rtol)
    first = solve_first_adjoint(frozen, bundle, cfg.adjoint.basis_degree)
    second = solve_second_adjoint(frozen, first, bundle, cfg.adjoint.basis_degree)
    mp = cfg.maxprin
    report = check_mp_conditions(spec, bundle, frozen, first, second, eta_grid=cone_grid(spec.cone, mp.eta_points),
                                 window=mp.window, size_only=mp.size_only)
    passed = report.passed
    if control.kappa >= mp.index and mp.duality_eps > 0:
        p = Perturbation(mp.index, mp.duality_eps, 0.0 if mp.size_only else mp.duality_eps, mp.direction,
                         _default_target(cfg, control, spec))
        var = simulate_variational(spec, bundle, frozen, p)
        dt = bundle.grid.dt
        d1 = duality_first(frozen, first, var, dt)
        d2 = duality_second(frozen, first, second, var, dt)
        variation = variational_inequality(spec, bundle, frozen, first, var)
        report.duality = {"first": d1.to_dict(), "second": d2.to_dict()}
        report.variations.append({"epsilon": p.size_weight, "epsilon_bar": p.time_shift, "direction": p.direction,
                                  **variation.to_dict()})
        passed = passed and d1.passed() and d2.passed()
    data = report.to_dict()
    data["passed"] = passed
    artifacts.write_json(out / "mp_report.json", data)
    return ["mp_report.json"], passed


def cmd_expansion_order(cfg, spec, preset, out: Path):
    path = out / artifacts.CONTROL_FILE
    if path.exists():
        control, x0, _ = _load_optimal(out)
    else:
        x0 = _x0(cfg, spec, preset)
        control = _configured_control(cfg, spec, preset)
    mp = cfg.maxprin
    if control.kappa < mp.index:
        raise ConfigError(f"the control has no impulse {mp.index} to perturb")
    target = _default_target(cfg, control, spec)
    perturbations = [Perturbation(mp.index, e, mp.coupling * e, mp.direction, target) for e in mp.epsilons]
    bundle = _bundle(cfg, spec, control, x0, perturbation_times(control, perturbations))
    frozen = compute_frozen(spec, bundle, rtol=cfg.adjoint.fd_rtol)
    report = check_expansion_orders(spec, bundle, frozen, mp.index, mp.epsilons, mp.coupling, mp.direction, target, mp.m)
    artifacts.write_csv(out / "expansion_order.csv", ["epsilon", "epsilon_bar", "claim", "estimate", "stderr"],
                        ([r["epsilon"], r["epsilon_bar"], r["claim"], r["estimate"], r["stderr"]] for r in report.rows))
    artifacts.write_json(out / "expansion_summary.json", report.to_dict())
    artifacts.emit_plot_data(out, "slope")
    return ["expansion_order.csv", "expansion_summary.json", "plot_slope.csv", "plot_slope.json"], report.passed


def cmd_report(cfg, out: Path):
    report = artifacts.aggregate_report(out)
    outputs = ["report.json", "report.txt"]
    if (out / artifacts.VALUE_FILE).exists():
        artifacts.emit_plot_data(out, "profile")
        artifacts.emit_plot_data(out, "region")
        outputs += ["plot_profile.csv", "plot_region.csv"]
    print((out / "report.txt").read_text(), end="")
    return outputs, report["passed"]


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "solve-qvi": cmd_solve_qvi,
    "check-dpp": cmd_check_dpp,
    "adjoint": cmd_adjoint,
    "check-mp": cmd_check_mp,
    "expansion-order": cmd_expansion_order,
}


def run(command: str, cfg: RunConfig) -> int:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if command == "report":
        outputs, passed = cmd_report(cfg, out)
    else:
        spec, preset = resolve_problem(cfg)
        logger.info(f"🚀 {command} on '{spec.name}' (seed {cfg.run.seed}, {cfg.run.threads} threads)")
        outputs, passed = HANDLERS[command](cfg, spec, preset, out)
    artifacts.write_manifest(out, command, cfg.resolved(), cfg.run.seed, outputs)
    logger.info(f"{'✅' if passed else '❌'} {command} finished; outputs in {out}")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("preset", "problem", "seed", "out_dir", "threads", "paths", "steps")}
    try:
        cfg = load_run_config(args.config, overrides)
        logging.basicConfig(level=cfg.run.log_level.upper())
        return run(args.command, cfg)
    except UnknownPresetError as e:
        logging.error(f"❌ {e}")
        return EXIT_UNKNOWN_PRESET
    except MissingArtifactError as e:
        logging.error(f"❌ {e}")
        return EXIT_MISSING_ARTIFACT
    except (DivergenceError, FixedPointError, DerivativeInconsistencyError, OrderCheckInconclusiveError, BundleMismatchError) as e:
        logging.error(f"❌ numerical failure: {e}")
        return EXIT_NUMERICAL
    except ImpulseToolkitError as e:
        logging.error(f"❌ {e}")
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
