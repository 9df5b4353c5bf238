#!/usr/bin/env python3

import copy
import json
import os
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from utils.log import get_logger

# Get the directory where the root script is located
ROOT_DIR = os.path.dirname(os.path.abspath(__file__))

logger = get_logger("save_load")

# In-code defaults; utils/settings.json is merged on top of these
DEFAULT_SETTINGS: Dict[str, Dict[str, Any]] = {
    "simulation": {
        "dt": 1.0 / 60.0,
        "lfc_period": 60,
        "horizon": 3000,
        "governor_form": "paper_eq3",
        "reference_substeps": 100,
    },
    "lfc": {
        "load_tol": 0.05,
        "freq_tol_hz": 0.2,
        "on_invalid": "alarm",
    },
    "adm": {
        "eps": 0.01,
        "min_pts": 4,
        "lookback": 1,
        "degenerate_margin": 1e-6,
    },
    "bdd": {
        "max_deviation": 0.04,
    },
    "optimizer": {
        "big_m": 1e4,
        "epsilon": 1e-6,
        "feasibility_tol": 1e-6,
        "gap_tol": 1e-6,
        "node_limit": 20000,
        "time_limit": 120.0,
    },
    "attack": {
        "injection_bound": 0.5,
        "omega_injection": False,
        "omega_injection_bound": 0.005,
        "trip_margin": 1e-5,
        "hull_margin": 1e-6,
        "bdd_margin": 1e-6,
        "omega_bounds": [0.9, 1.1],
        "max_variables": 250000,
        "resiliency_exact_limit": 10,
        "resiliency_samples": 50,
    },
    "ingest": {
        "degree": 3,
        "window": 8,
        "source_interval_minutes": 10,
        "base_mva": 100.0,
    },
    "synthetic": {
        "days": 7,
        "samples_per_day": 144,
        "daily_amplitude": 0.4,
        "noise_sigma": 0.002,
    },
}


def ensure_directory_exists(file_path: str) -> None:
    """Create the parent directory of an output file such as plot data or an attack vector"""
    parent = os.path.dirname(file_path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def get_absolute_path(path: str) -> str:
    """
    Resolve a data path

    Absolute paths and paths that exist from the working directory are kept;
    anything else names a bundled file (case, settings, scenario) under the repo root.
    """
    if os.path.isabs(path) or os.path.exists(path):
        return os.path.abspath(path)
    return os.path.join(ROOT_DIR, path)


def load_json_file(file_path: str, default: Optional[Any] = None) -> Any:
    """
    Load JSON from file, falling back to a default

    When a default is given and the file is missing or corrupt, the default is
    written to the file and returned. Without a default, errors propagate.

    Args:
        file_path: Relative or absolute path to the JSON file
        default: Value used when the file is missing or invalid

    Returns:
        Loaded JSON data, or the default
    """
    abs_path = get_absolute_path(file_path)
    try:
        if os.path.exists(abs_path):
            with open(abs_path, "r") as f:
                return json.load(f)
        if default is not None:
            save_json_file(abs_path, default)
            return default
        raise FileNotFoundError(f"File not found: {abs_path}")
    except json.JSONDecodeError:
        if default is None:
            raise
        logger.warning("corrupt JSON in %s, rewriting defaults", abs_path)
        save_json_file(abs_path, default)
        return default


def canonical_json(data: Any) -> str:
    """Serialize to the canonical text form used for every file we write"""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def save_json_file(file_path: str, data: Any) -> bool:
    """
    Save JSON to file in canonical form

    Args:
        file_path: Relative or absolute path to save the JSON file
        data: Data to save as JSON

    Returns:
        True if successful, False otherwise
    """
    abs_path = get_absolute_path(file_path)
    try:
        ensure_directory_exists(abs_path)
        with open(abs_path, "w") as f:
            f.write(canonical_json(data))
            f.flush()
            os.fsync(f.fileno())  # Force write to disk
        return True
    except OSError as e:
        logger.error("could not save %s: %s", abs_path, e)
        return False


def save_csv_file(file_path: str, rows: List[Dict[str, Any]], columns: Sequence[str]) -> str:
    """
    Write rows as a tidy CSV with a fixed column order

    An empty row list still produces the header line.

    Returns:
        Absolute path of the written file
    """
    abs_path = get_absolute_path(file_path)
    ensure_directory_exists(abs_path)
    frame = pd.DataFrame(rows, columns=list(columns))
    frame.to_csv(abs_path, index=False, lineterminator="\n")
    return abs_path


def _merge_defaults(defaults: Dict[str, Any], loaded: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in loaded.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge_defaults(merged[key], value)
        else:
            merged[key] = value
    return merged


def get_settings_path() -> str:
    """Get the path to the settings file"""
    custom = os.environ.get("LFC_CONFIG")
    if custom:
        return custom
    return os.path.join(ROOT_DIR, "utils", "settings.json")


def load_settings(overrides: Optional[Dict] = None) -> Dict:
    """
    Load settings from the settings file over the in-code defaults

    Args:
        overrides: Optional nested dict applied last (scenario or CLI values)
    """
    loaded = load_json_file(get_settings_path(), DEFAULT_SETTINGS)
    settings = _merge_defaults(DEFAULT_SETTINGS, loaded)
    if overrides:
        settings = _merge_defaults(settings, overrides)
    return settings
