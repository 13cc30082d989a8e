"""Deterministic CSV/JSON/NPZ outputs, run manifests and the report aggregator"""

import csv
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import psutil

import mc_stats
from errors import ConfigError, MissingArtifactError
from model import ImpulseControl
from qvi import PolicyMap, SolveGrid, ValueFunction

logger = logging.getLogger(__name__)

VALUE_FILE = "value_function.npz"
CONTROL_FILE = "optimal_control.json"
SUMMARY_FILES = {
    "validate": "assumptions.json",
    "simulate": "simulate_summary.json",
    "solve-qvi": "qvi_summary.json",
    "check-dpp": "dpp_summary.json",
    "adjoint": "adjoint_summary.json",
    "check-mp": "mp_report.json",
    "expansion-order": "expansion_summary.json",
}


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, default=_plain) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    return json.loads(path.read_text())


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_dict_rows(path, rows: List[dict]) -> Path:
    header = list(rows[0].keys()) if rows else []
    return write_csv(path, header, ([r[h] for h in header] for r in rows))


def read_csv(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(out_dir, command: str, resolved: dict, seed: int, outputs: Sequence[str] = ()) -> Path:
    """The only file that carries a timestamp"""
    memory = psutil.virtual_memory()
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "outputs": sorted(outputs),
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "host": {
            "memory_used_mb": round(memory.used / (1024 * 1024), 2),
            "memory_percent": memory.percent,
            "cpu_count": psutil.cpu_count(),
        },
    }
    return write_json(Path(out_dir) / f"manifest_{command}.json", manifest)


# -- value function and control ---------------------------------------------

def save_value_function(path, vf: ValueFunction, policy: PolicyMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        values=vf.values,
        obstacle=vf.obstacle,
        tau_values=vf.grid.tau_values,
        t_nodes=vf.grid.t_nodes,
        x_nodes=vf.grid.x_nodes,
        boundary_margin=vf.grid.boundary_margin,
        per_ray=vf.grid.per_ray,
        substeps=np.asarray(vf.substeps, dtype=int),
        intervene=policy.intervene,
        impulse_size=policy.impulse_size,
    )
    return path


def load_value_function(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing value function {path}; run solve-qvi first")
    with np.load(path) as data:
        grid = SolveGrid(
            tau_values=data["tau_values"],
            t_nodes=data["t_nodes"],
            x_nodes=data["x_nodes"],
            boundary_margin=int(data["boundary_margin"]),
            per_ray=int(data["per_ray"]),
        )
        vf = ValueFunction(values=data["values"], obstacle=data["obstacle"], grid=grid, substeps=data["substeps"].tolist())
        policy = PolicyMap(
            intervene=data["intervene"],
            impulse_size=data["impulse_size"],
            tau_values=grid.tau_values,
            t_nodes=grid.t_nodes,
            x_nodes=grid.x_nodes,
        )
    return vf, policy


def save_control(path, control: ImpulseControl, x0, extra: Optional[dict] = None) -> Path:
    data = {"control": control.to_dict(), "x0": list(np.asarray(x0, dtype=float).ravel())}
    data.update(extra or {})
    return write_json(path, data)


def load_control(path):
    data = read_json(path)
    try:
        raw = data["control"]
        control = ImpulseControl(
            start_time=float(raw["start_time"]),
            times=tuple(float(t) for t, _ in raw["impulses"]),
            sizes=tuple(tuple(float(v) for v in s) for _, s in raw["impulses"]),
        )
        return control, np.asarray(data["x0"], dtype=float), data
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed control artifact {path}: {e}") from None


# -- row builders -----------------------------------------------------------

def trajectory_rows(traj, max_paths: int) -> List[list]:
    rows = []
    n = traj.post.shape[-1]
    for p in range(min(max_paths, traj.post.shape[0])):
        for k, t in enumerate(traj.grid.nodes):
            rows.append([p, k, float(t)] + [float(traj.pre[p, k, a]) for a in range(n)]
                        + [float(traj.post[p, k, a]) for a in range(n)] + [int(traj.active_count[p, k])])
    return rows


def trajectory_header(n: int) -> List[str]:
    return ["path_id", "node_index", "time"] + [f"pre_value_{a}" for a in range(n)] + [f"post_value_{a}" for a in range(n)] + ["active_count"]


def value_header(n: int) -> List[str]:
    return ["tau", "t", "x", "V", "intervene"] + [f"xi_hat_{a}" for a in range(n)]


def value_rows(vf: ValueFunction, policy: PolicyMap) -> List[list]:
    """(tau, t, x, V, intervene, xi_hat...) on valid nodes; xi_hat is zero outside the intervention region"""
    grid = vf.grid
    valid = grid.valid()
    n = policy.impulse_size.shape[-1]
    rows = []
    for s, tau in enumerate(grid.tau_values):
        for j, t in enumerate(grid.t_nodes):
            if not valid[s, j]:
                continue
            for i, x in enumerate(grid.x_nodes):
                size = [float(policy.impulse_size[s, j, i, a]) for a in range(n)]
                rows.append([float(tau), float(t), float(x), float(vf.values[s, j, i]), int(policy.intervene[s, j, i])] + size)
    return rows


# -- plot data --------------------------------------------------------------

def emit_plot_data(out_dir, kind: str, tau: Optional[float] = None, t: Optional[float] = None) -> List[Path]:
    """Plain numeric files for external plotting: profile, slope or region"""
    out_dir = Path(out_dir)
    if kind == "profile":
        vf, _ = load_value_function(out_dir / VALUE_FILE)
        s = vf.slice_index(vf.grid.tau_values[0] if tau is None else tau)
        j = int(np.argmin(np.abs(vf.grid.t_nodes - (vf.grid.t_nodes[0] if t is None else t))))
        rows = [[float(x), float(v)] for x, v in zip(vf.grid.x_nodes, vf.values[s, j])]
        return [write_csv(out_dir / "plot_profile.csv", ["x", "V"], rows)]
    if kind == "region":
        vf, policy = load_value_function(out_dir / VALUE_FILE)
        s = vf.slice_index(vf.grid.tau_values[0] if tau is None else tau)
        valid = vf.grid.valid()[s]
        rows = [[float(tt), float(x), int(policy.intervene[s, j, i])]
                for j, tt in enumerate(vf.grid.t_nodes) if valid[j]
                for i, x in enumerate(vf.grid.x_nodes)]
        return [write_csv(out_dir / "plot_region.csv", ["t", "x", "intervene"], rows)]
    if kind == "slope":
        records = read_csv(out_dir / "expansion_order.csv")
        claims: Dict[str, list] = {}
        for r in records:
            claims.setdefault(r["claim"], []).append((float(r["epsilon"]), float(r["estimate"])))
        rows = []
        slopes = {}
        for claim, pairs in sorted(claims.items()):
            positive = [(e, v) for e, v in pairs if v > 0]
            for e, v in positive:
                rows.append([claim, math.log(e), math.log(v)])
            if len(positive) >= 2:
                slopes[claim] = mc_stats.fit_slope([e for e, _ in positive], [v for _, v in positive])
        paths = [write_csv(out_dir / "plot_slope.csv", ["claim", "log_epsilon", "log_estimate"], rows)]
        paths.append(write_json(out_dir / "plot_slope.json", {"slopes": slopes}))
        return paths
    raise ConfigError(f"unknown plot kind '{kind}'")


# -- report -----------------------------------------------------------------

def _status(data: dict) -> Optional[bool]:
    if "passed" in data:
        return bool(data["passed"])
    checks = data.get("checks")
    if isinstance(checks, dict):
        return all(bool(v) for v in checks.values())
    return None


def aggregate_report(out_dir) -> dict:
    """Fold every known summary in out_dir into one report"""
    out_dir = Path(out_dir)
    found = {}
    for command, name in SUMMARY_FILES.items():
        path = out_dir / name
        if path.exists():
            found[command] = read_json(path)
    if not found:
        raise MissingArtifactError(f"no summaries found in {out_dir}")
    entries = {command: {"file": SUMMARY_FILES[command], "passed": _status(data)} for command, data in found.items()}
    report = {
        "commands": entries,
        "passed": all(e["passed"] is not False for e in entries.values()),
        "details": found,
    }
    write_json(out_dir / "report.json", report)
    lines = [f"{'command':<18}{'status':<10}file"]
    for command, entry in entries.items():
        status = {True: "pass", False: "FAIL", None: "-"}[entry["passed"]]
        lines.append(f"{command:<18}{status:<10}{entry['file']}")
    table = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(table)
    logger.info(f"📊 report over {len(entries)} commands written to {out_dir}")
    return report
