#!/usr/bin/env python3

"""
Load series ingestion: dataset CSV to per-bus p.u. series, curve-fit
imputation of gaps, resampling onto the simulation timeslots and a seeded
synthetic fallback when no dataset is available.
"""

import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial import Polynomial

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import GapTooWide, MalformedCase, MalformedRow, UnknownBus
from grid_model.grid_model import NetworkModel
from save_load import load_json_file, save_csv_file, save_json_file
from utils.log import get_logger

logger = get_logger("ingest")

CSV_COLUMNS = ("timestamp_iso8601", "bus_id", "load_mw")
LOAD_TABLE_COLUMNS = ["timeslot", "bus_id", "load_pu"]
SOURCES = ("measured", "imputed", "synthetic")


@dataclass
class LoadSeries:
    """
    Load of one bus on a regular time grid, p.u.

    Missing readings are NaN until imputed; `imputed` marks filled entries.
    """
    bus: int
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    source: str = "measured"
    imputed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.imputed is None:
            self.imputed = np.zeros(len(self.values), dtype=bool)
        if len(self.timestamps) != len(self.values):
            raise ValueError("one timestamp per value")
        if len(self.timestamps) > 1 and not self.timestamps.is_monotonic_increasing:
            raise ValueError("timestamps must increase")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def gaps(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def has_gaps(self) -> bool:
        return bool(self.gaps.any())


def default_bus_mapping(network: NetworkModel, zones: Sequence[int]) -> Dict[int, int]:
    """Source zones onto the network's load buses, round-robin in ascending order"""
    load_buses = network.measured_buses
    if not load_buses:
        raise UnknownBus(f"{network.name} has no load buses")
    return {zone: load_buses[k % len(load_buses)] for k, zone in enumerate(sorted(zones))}


def load_bus_mapping(path: str) -> Dict[int, int]:
    """Mapping file: {"<zone id>": <bus id>}"""
    data = load_json_file(path)
    if not isinstance(data, dict):
        raise MalformedCase(f"{path}: bus mapping must be an object")
    try:
        return {int(zone): int(bus) for zone, bus in data.items()}
    except (TypeError, ValueError) as e:
        raise MalformedCase(f"{path}: {e}") from e


def save_bus_mapping(mapping: Dict[int, int], path: str) -> bool:
    return save_json_file(path, {str(zone): bus for zone, bus in sorted(mapping.items())})


def _read_rows(path: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedRow(f"{path}: {e}") from e
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedRow(f"{path}: missing columns {missing}")
    df = df[list(CSV_COLUMNS)].copy()
    df["timestamp"] = pd.to_datetime(df["timestamp_iso8601"], errors="coerce", utc=True)
    df["zone"] = pd.to_numeric(df["bus_id"], errors="coerce")
    df["mw"] = pd.to_numeric(df["load_mw"], errors="coerce")
    for column, label in (("timestamp", "timestamp"), ("zone", "bus id"), ("mw", "load")):
        bad = df.index[df[column].isna()]
        if len(bad):
            # +2: header line and 1-based numbering
            raise MalformedRow(f"{path}: line {bad[0] + 2}: unparseable {label}")
    negative = df.index[df["mw"] < 0]
    if len(negative):
        raise MalformedRow(f"{path}: line {negative[0] + 2}: negative load {df.loc[negative[0], 'mw']}")
    if (df["zone"] != df["zone"].round()).any():
        raise MalformedRow(f"{path}: bus ids must be integers")
    df["zone"] = df["zone"].astype(int)
    duplicated = df.duplicated(subset=["zone", "timestamp"])
    if duplicated.any():
        k = df.index[duplicated][0]
        raise MalformedRow(f"{path}: line {k + 2}: duplicate reading")
    return df


def load_hourly_csv(path: str, network: Optional[NetworkModel] = None,
                    bus_mapping: Optional[Dict[int, int]] = None,
                    base_mva: Optional[float] = None,
                    interval_minutes: int = 60) -> Dict[int, LoadSeries]:
    """
    Read `timestamp_iso8601,bus_id,load_mw` rows into per-bus p.u. series

    Args:
        path: dataset CSV
        network: when given, every mapped bus must exist in it and its base MVA is used
        bus_mapping: source zone id -> bus id; identity without one
        base_mva: system base, overrides the network's
        interval_minutes: spacing of the regular grid the series are placed on

    Returns:
        Series keyed by bus id; missing readings are NaN on the grid

    Raises:
        MalformedRow: unparseable, negative or duplicate rows
        UnknownBus: a mapped bus is not part of the network
    """
    df = _read_rows(path)
    mapping = bus_mapping or {}
    df["bus"] = df["zone"].map(lambda z: mapping.get(z, z))
    if network is not None:
        unknown = sorted(set(df["bus"]) - set(network.bus_ids))
        if unknown:
            raise UnknownBus(f"{path}: buses {unknown} are not in {network.name}")
    base = base_mva or (network.base_mva if network is not None else 100.0)
    # several zones may share a bus
    per_bus = df.groupby(["bus", "timestamp"], sort=True)["mw"].sum() / base

    step = pd.Timedelta(minutes=interval_minutes)
    result = {}
    for bus, series in per_bus.groupby(level=0):
        values = series.droplevel(0)
        grid = pd.date_range(values.index.min(), values.index.max(), freq=step)
        off_grid = values.index.difference(grid)
        if len(off_grid):
            raise MalformedRow(f"{path}: bus {bus}: reading at {off_grid[0]} is off the "
                               f"{interval_minutes}-minute grid")
        aligned = values.reindex(grid)
        result[int(bus)] = LoadSeries(int(bus), grid, aligned.to_numpy(dtype=float))
        gaps = int(aligned.isna().sum())
        if gaps:
            logger.info("bus %d: %d missing readings to impute", bus, gaps)
    logger.debug("%s: %d buses, %d rows", path, len(result), len(df))
    return result


def _gap_runs(mask: np.ndarray) -> List[tuple]:
    runs = []
    k = 0
    while k < len(mask):
        if mask[k]:
            start = k
            while k < len(mask) and mask[k]:
                k += 1
            runs.append((start, k))
        else:
            k += 1
    return runs


def impute_curve_fit(series: LoadSeries, degree: int = 3, window: int = 8) -> LoadSeries:
    """
    Fill gaps with a least-squares polynomial over the surrounding readings

    Each gap is fitted on up to window/2 observed points on either side; the
    degree drops when fewer points are available. Observed points are never
    changed.

    Raises:
        GapTooWide: a gap lacks readings on one side or has fewer than 4 in total
    """
    values = series.values.copy()
    gaps = np.isnan(values)
    if not gaps.any():
        return series
    observed = np.flatnonzero(~gaps)
    half = max(window // 2, 1)
    filled = series.imputed.copy()
    for start, stop in _gap_runs(gaps):
        before = observed[observed < start][-half:]
        after = observed[observed >= stop][:half]
        support = np.concatenate([before, after])
        if len(before) == 0 or len(after) == 0 or len(support) < 4:
            raise GapTooWide(f"bus {series.bus}: gap at positions {start}..{stop - 1} has "
                             f"{len(before)} readings before and {len(after)} after")
        fit = Polynomial.fit(support, series.values[support], deg=min(degree, len(support) - 1))
        positions = np.arange(start, stop)
        values[positions] = np.clip(fit(positions), 0.0, None)
        filled[positions] = True
    logger.debug("bus %d: imputed %d readings", series.bus, int(gaps.sum()))
    return replace(series, values=values, source="imputed", imputed=filled)


def resample_consecutive(series: LoadSeries, lfc_period: int,
                         source_interval_minutes: Optional[int] = None) -> np.ndarray:
    """
    One LFC cycle per reading, held for lfc_period timeslots

    Consecutive readings are treated as consecutive LFC-cycle loads, so the
    result has len(series) * lfc_period timeslots and no smoothing.
    """
    if series.has_gaps:
        raise ValueError(f"bus {series.bus}: impute gaps before resampling")
    if lfc_period < 1:
        raise ValueError("lfc_period must be at least 1")
    if source_interval_minutes is not None and len(series) > 1:
        spacing = (series.timestamps[1] - series.timestamps[0]) / pd.Timedelta(minutes=1)
        if spacing != source_interval_minutes:
            logger.warning("bus %d: readings are %g minutes apart, expected %d",
                           series.bus, spacing, source_interval_minutes)
    return np.repeat(series.values, lfc_period)


def synth_load(base: float, daily_amplitude: float, noise_sigma: float, length: int,
               seed: int, samples_per_day: int = 144, bus: int = 0,
               start: str = "2014-01-01") -> LoadSeries:
    """
    Daily sinusoid around base plus seeded Gaussian noise, clipped at zero

    Args:
        base, daily_amplitude, noise_sigma: p.u.
        length: number of samples
        samples_per_day: 144 for 10-minute readings
    """
    if base <= 0:
        raise ValueError("base load must be positive")
    rng = np.random.default_rng(seed)
    k = np.arange(length)
    shape = base + daily_amplitude * np.sin(2.0 * np.pi * k / samples_per_day)
    values = np.clip(shape + rng.normal(0.0, noise_sigma, length), 0.0, None)
    stamps = pd.date_range(start, periods=length, freq=pd.Timedelta(days=1) / samples_per_day)
    return LoadSeries(bus, stamps, values, source="synthetic")


def synthetic_loads(network: NetworkModel, settings: Dict[str, Any], seed: int) -> Dict[int, LoadSeries]:
    """
    Synthetic series for every load bus, amplitude and noise relative to the base load

    Args:
        settings: the "synthetic" settings section
    """
    days = int(settings.get("days", 7))
    per_day = int(settings.get("samples_per_day", 144))
    result = {}
    for k, bus in enumerate(network.measured_buses):
        base = network.base_loads[bus - 1]
        result[bus] = synth_load(base, float(settings.get("daily_amplitude", 0.4)) * base,
                                 float(settings.get("noise_sigma", 0.002)) * base,
                                 days * per_day, seed + k, per_day, bus)
    return result


def build_load_table(network: NetworkModel, series_by_bus: Dict[int, LoadSeries],
                     lfc_period: int) -> np.ndarray:
    """
    Timeslots x buses load table; buses without a series carry zero load

    Series of different lengths are cut to the shortest one.
    """
    unknown = sorted(set(series_by_bus) - set(network.bus_ids))
    if unknown:
        raise UnknownBus(f"buses {unknown} are not in {network.name}")
    if not series_by_bus:
        raise ValueError("no load series")
    lengths = {len(s) for s in series_by_bus.values()}
    cycles = min(lengths)
    if len(lengths) > 1:
        logger.warning("load series have %d..%d readings, using the first %d", cycles, max(lengths), cycles)
    table = np.zeros((cycles * lfc_period, network.n_buses))
    for bus, series in series_by_bus.items():
        table[:, bus - 1] = resample_consecutive(series, lfc_period)[:cycles * lfc_period]
    return table


def cycle_series(table: np.ndarray, lfc_period: int) -> np.ndarray:
    """Loads at the LFC cycle starts: rows 0, p, 2p, ..."""
    return np.asarray(table, dtype=float)[::lfc_period]


def write_load_table(table: np.ndarray, network: NetworkModel, path: str) -> str:
    """Load table CSV: timeslot, bus_id, load_pu"""
    rows = [{"timeslot": t, "bus_id": bus, "load_pu": float(table[t, bus - 1])}
            for t in range(table.shape[0]) for bus in network.bus_ids]
    return save_csv_file(path, rows, LOAD_TABLE_COLUMNS)


def read_load_table(path: str, network: NetworkModel) -> np.ndarray:
    """Inverse of write_load_table"""
    try:
        df = pd.read_csv(path)
        pivot = df.pivot(index="timeslot", columns="bus_id", values="load_pu").sort_index()
    except (KeyError, ValueError, pd.errors.ParserError) as e:
        raise MalformedRow(f"{path}: {e}") from e
    unknown = sorted(set(int(b) for b in pivot.columns) - set(network.bus_ids))
    if unknown:
        raise UnknownBus(f"{path}: buses {unknown} are not in {network.name}")
    table = np.zeros((len(pivot), network.n_buses))
    for bus in pivot.columns:
        table[:, int(bus) - 1] = pivot[bus].fillna(0.0).to_numpy(dtype=float)
    return table
