"""Run configuration: environment defaults, TOML files and problem definitions"""

import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError
from model import CoefficientFamily, ConeSpec, ImpulseCost, ProblemSpec, TauFactor
from presets import Preset, get_preset

logger = logging.getLogger(__name__)

ENV_FILE = "impulse_config.env"


def env_defaults(env_file: str = ENV_FILE) -> dict:
    """[run] defaults from the environment, after loading the env file if present"""
    if Path(env_file).exists():
        load_dotenv(env_file)
    try:
        return {
            "seed": int(os.getenv("IMPULSE_SEED", "20240601")),
            "out_dir": os.getenv("IMPULSE_OUT_DIR", "runs"),
            "threads": int(os.getenv("IMPULSE_THREADS", "1")),
            "paths": int(os.getenv("IMPULSE_PATHS", "10000")),
            "steps": int(os.getenv("IMPULSE_STEPS", "200")),
            "log_level": os.getenv("IMPULSE_LOG_LEVEL", "INFO"),
        }
    except ValueError as e:
        raise ConfigError(f"bad IMPULSE_* environment value: {e}") from None


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    preset: Optional[str] = None
    problem: Optional[str] = None
    seed: int = Field(20240601, ge=0)
    out_dir: str = "runs"
    threads: int = Field(1, ge=1)
    paths: int = Field(10000, ge=100)
    steps: int = Field(200, ge=16)
    log_level: str = "INFO"
    x0: Optional[List[float]] = None


class QviSection(_Section):
    nx: int = Field(200, ge=10)
    nt: int = Field(200, ge=2)
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    tau_values: Optional[List[float]] = None
    per_ray: int = Field(101, ge=2)
    boundary_margin: int = Field(10, ge=0)
    tolerance: float = Field(1e-8, gt=0)
    max_iterations: int = Field(50, ge=1)
    refine: bool = False


class SimulateSection(_Section):
    dump_paths: int = Field(10, ge=0)
    moment_power: int = Field(2, ge=1)
    ci_tolerance: float = Field(0.1, gt=0)


class DppSection(_Section):
    points: int = Field(20, ge=1)
    delta: float = Field(0.1, gt=0)
    paths: Optional[int] = Field(None, ge=100)
    sim_steps: int = Field(32, ge=16)


class AdjointSection(_Section):
    basis_degree: int = Field(3, ge=0, le=6)
    source: Literal["control", "qvi"] = "control"
    fd_rtol: float = Field(1e-4, gt=0)
    refine_sweeps: int = Field(2, ge=0)
    fk_tolerance: float = Field(0.05, gt=0)


class MaxprinSection(_Section):
    index: int = Field(1, ge=1)
    epsilons: List[float] = [0.2, 0.1, 0.05, 0.025]
    coupling: float = Field(1.0, gt=0)
    direction: Literal["forward", "backward"] = "forward"
    target: Optional[List[float]] = None
    m: Literal[1, 2] = 1
    eta_points: int = Field(9, ge=2)
    window: float = Field(0.025, gt=0)
    duality_eps: float = Field(0.05, ge=0, lt=1)
    size_only: bool = False


class ValidateSection(_Section):
    samples: int = Field(1000, ge=100)
    derivative_rtol: float = Field(1e-4, gt=0)


class ControlSection(_Section):
    start: float = 0.0
    impulses: List[Tuple[float, List[float]]] = []


class RunConfig(_Section):
    run: RunSection = RunSection()
    qvi: QviSection = QviSection()
    simulate: SimulateSection = SimulateSection()
    dpp: DppSection = DppSection()
    adjoint: AdjointSection = AdjointSection()
    maxprin: MaxprinSection = MaxprinSection()
    validate_: ValidateSection = Field(ValidateSection(), alias="validate")
    control: ControlSection = ControlSection()

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def resolved(self) -> dict:
        return self.model_dump(by_alias=True)


def _read_toml(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed TOML in {path}: {e}") from None


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None, env_file: str = ENV_FILE) -> RunConfig:
    """flag > config file > environment > built-in default"""
    data = _read_toml(path) if path else {}
    run = dict(env_defaults(env_file))
    run.update(data.get("run", {}))
    run.update({k: v for k, v in (overrides or {}).items() if v is not None})
    data["run"] = run
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from None


def _family(table: dict, name: str, dim: int, vector: bool) -> CoefficientFamily:
    if "kind" not in table or "params" not in table:
        raise ConfigError(f"'{name}' needs kind and params")
    tau = TauFactor(table.get("tau_dependence", "none"), tuple(table.get("tau_params", ())))
    return CoefficientFamily(name=name, kind=table["kind"], params=tuple(table["params"]), dim=dim, vector=vector, tau=tau)


def problem_from_dict(data: dict, name: str = "custom") -> ProblemSpec:
    try:
        problem = data["problem"]
        dim = int(problem["dim_state"])
        coefficients = data["coefficients"]
        costs = data["costs"]
        impulse = costs["impulse"]
        cone = data["cone"]
        return ProblemSpec(
            dim_state=dim,
            horizon=float(problem["horizon"]),
            tau0=float(problem.get("tau0", 0.0)),
            drift=_family(coefficients["drift"], "drift", dim, True),
            diffusion=_family(coefficients["diffusion"], "diffusion", dim, True),
            running_cost=_family(costs["running"], "running_cost", dim, False),
            terminal_cost=_family(costs["terminal"], "terminal_cost", dim, False),
            impulse_cost=ImpulseCost(
                scale=float(impulse["scale"]),
                fixed=float(impulse.get("fixed", 1.0)),
                power=float(impulse.get("power", 1.0)),
                tau=TauFactor(impulse.get("tau_dependence", "none"), tuple(impulse.get("tau_params", ()))),
                ell0=float(impulse["ell0"]),
                mu=float(impulse.get("mu", 1.0)),
            ),
            cone=ConeSpec(dimension=dim, generators=tuple(tuple(g) for g in cone["generators"]),
                          size_cap=float(cone.get("size_cap", 5.0))),
            semantics=problem.get("semantics", "stacking"),
            max_impulses=int(problem.get("max_impulses", 10)),
            name=name,
        )
    except KeyError as e:
        raise ConfigError(f"problem definition is missing {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"problem definition is malformed: {e}") from None


def load_problem(path: str) -> ProblemSpec:
    return problem_from_dict(_read_toml(path), name=Path(path).stem)


def resolve_problem(cfg: RunConfig) -> Tuple[ProblemSpec, Optional[Preset]]:
    """Problem file wins over the preset name"""
    if cfg.run.problem:
        spec = load_problem(cfg.run.problem)
        logger.info(f"📄 loaded problem '{spec.name}' from {cfg.run.problem}")
        return spec, None
    if cfg.run.preset:
        preset = get_preset(cfg.run.preset)
        return preset.build(), preset
    raise ConfigError("no problem given: pass --preset or set [run] problem")
