#!/usr/bin/env python3

import os
from typing import Any, Dict, List, Sequence

# Import utilities
from dynamics.dynamics import Trajectory
from grid_model.grid_model import NetworkModel
from save_load import ensure_directory_exists, save_csv_file, save_json_file
from utils.log import get_logger

logger = get_logger("report")

# One CSV per panel of a trajectory figure
PLOT_FILES = {
    "loads": ["t", "bus", "load_pu", "perceived_pu"],
    "p_g": ["t", "bus", "p_g"],
    "p_r": ["cycle", "t", "bus", "p_r"],
    "freq": ["t", "bus", "freq_hz"],
}

PLOT_DESCRIPTIONS = {
    "loads": "true load and the load perceived by the LFC per bus (perceived is set at cycle starts)",
    "p_g": "electrical generator output per generator bus",
    "p_r": "reference setpoint dispatched at each LFC cycle per generator bus",
    "freq": "generator frequency in Hz",
}

# Known experiment tables; anything else keeps the column order of its first row
TABLE_COLUMNS = {
    "accessibility": ["defense", "goal", "k", "buses", "feasible", "timeslots", "cycles"],
    "resiliency": ["defense", "goal", "horizon_timeslots", "horizon_cycles", "k", "bound"],
    "scalability": ["defense", "goal", "timeslots", "variables", "status", "wall_seconds"],
    "scalability_fit": ["defense", "goal", "slope", "intercept", "r2"],
    "validation": ["case_study", "bus", "max_deviation_hz"],
    "detector_complexity": ["stage", "complexity", "size"],
    "solves": ["horizon", "status", "nodes", "variables", "binaries", "wall_time"],
}


def _columns(name: str, rows: List[Dict[str, Any]]) -> List[str]:
    if name in TABLE_COLUMNS:
        return TABLE_COLUMNS[name]
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


def plot_rows(trajectory: Trajectory, network: NetworkModel) -> Dict[str, List[Dict[str, Any]]]:
    """Tidy rows for the four figure panels of one trajectory"""
    rows: Dict[str, List[Dict[str, Any]]] = {key: [] for key in PLOT_FILES}
    perceived_by_cycle = {r.cycle: r.perception.perceived_loads for r in trajectory.dispatch}
    p = trajectory.lfc_period
    for state in trajectory.states:
        perceived = perceived_by_cycle.get(state.t // p)
        for bus in network.bus_ids:
            rows["loads"].append({
                "t": state.t, "bus": bus, "load_pu": float(state.load[bus - 1]),
                "perceived_pu": None if perceived is None else float(perceived[bus - 1]),
            })
        for g, bus in enumerate(network.generator_buses):
            rows["p_g"].append({"t": state.t, "bus": bus, "p_g": float(state.gen_power[g])})
            rows["freq"].append({"t": state.t, "bus": bus,
                                 "freq_hz": float(state.omega[g] * network.base_frequency)})
    for record in trajectory.dispatch:
        for g, bus in enumerate(network.generator_buses):
            rows["p_r"].append({"cycle": record.cycle, "t": record.t, "bus": bus, "p_r": float(record.p_r[g])})
    return rows


def _readme(report, written: Sequence[str]) -> str:
    lines = [f"# {report.name}", "", f"Scenario digest: `{report.scenario_digest}`", "",
             "All power values are per unit on the system base; `t` is the simulation timeslot.", "",
             "## Files", ""]
    for path in written:
        name = os.path.basename(path)
        for key, description in PLOT_DESCRIPTIONS.items():
            if name.endswith(f"_{key}.csv"):
                lines.append(f"- `{name}`: {description}. Columns: {', '.join(PLOT_FILES[key])}.")
                break
        else:
            if name == "summary.json":
                lines.append("- `summary.json`: scenario digest, headline numbers and replay verdicts.")
            else:
                table = name[len(report.name) + 1:-len(".csv")]
                columns = TABLE_COLUMNS.get(table)
                suffix = f" Columns: {', '.join(columns)}." if columns else ""
                lines.append(f"- `{name}`: {table.replace('_', ' ')} table.{suffix}")
    lines.append("")
    return "\n".join(lines)


def emit_plot_data(report, out_dir: str) -> List[str]:
    """
    Write the report as plot-ready files

    Args:
        report: ExperimentReport
        out_dir: target directory, created if missing

    Returns:
        Paths written, in a fixed order
    """
    written = []
    trajectories = report.trajectories or {None: None}
    for key, trajectory in sorted(trajectories.items(), key=lambda kv: kv[0] or ""):
        prefix = report.name if key is None else f"{report.name}_{key}"
        rows = plot_rows(trajectory, report.network) if trajectory is not None else {k: [] for k in PLOT_FILES}
        for panel, columns in PLOT_FILES.items():
            path = os.path.join(out_dir, f"{prefix}_{panel}.csv")
            written.append(save_csv_file(path, rows[panel], columns))

    for name, rows in sorted(report.tables.items()):
        path = os.path.join(out_dir, f"{report.name}_{name}.csv")
        written.append(save_csv_file(path, rows, _columns(name, rows)))
    if report.verification:
        path = os.path.join(out_dir, f"{report.name}_verification.csv")
        written.append(save_csv_file(path, report.verification, _columns("verification", report.verification)))

    summary_path = os.path.join(out_dir, "summary.json")
    save_json_file(summary_path, {
        "name": report.name,
        "scenario_digest": report.scenario_digest,
        "summary": report.summary,
        "verification": report.verification,
        "files": sorted(os.path.basename(p) for p in written),
    })
    written.append(os.path.abspath(summary_path))

    readme_path = os.path.abspath(os.path.join(out_dir, "README.md"))
    ensure_directory_exists(readme_path)
    with open(readme_path, "w") as f:
        f.write(_readme(report, written))
    written.append(readme_path)
    logger.info("wrote %d files to %s", len(written), out_dir)
    return written
