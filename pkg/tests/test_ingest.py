import numpy as np
import pandas as pd
import pytest

from errors import GapTooWide, MalformedRow, UnknownBus
from ingest.ingest import (
    LoadSeries,
    build_load_table,
    cycle_series,
    default_bus_mapping,
    impute_curve_fit,
    load_bus_mapping,
    load_hourly_csv,
    read_load_table,
    resample_consecutive,
    save_bus_mapping,
    synth_load,
    synthetic_loads,
    write_load_table,
)

HEADER = "timestamp_iso8601,bus_id,load_mw\n"


def _csv(tmp_path, rows, name="loads.csv"):
    path = tmp_path / name
    path.write_text(HEADER + "".join(f"{r}\n" for r in rows))
    return str(path)


def _hours(n):
    return [f"2014-01-01T{h:02d}:00:00Z" for h in range(n)]


def _series(values, bus=3):
    stamps = pd.date_range("2014-01-01", periods=len(values), freq=pd.Timedelta(hours=1))
    return LoadSeries(bus, stamps, np.asarray(values, dtype=float))


def test_hourly_rows_become_pu_series(tmp_path, case3):
    rows = [f"{t},3,{90 + k}" for k, t in enumerate(_hours(4))]
    rows += [f"{t},2,60" for t in _hours(4)]
    series = load_hourly_csv(_csv(tmp_path, rows), case3)
    assert sorted(series) == [2, 3]
    np.testing.assert_allclose(series[3].values, [0.90, 0.91, 0.92, 0.93])
    assert not series[2].has_gaps


def test_missing_hours_are_gaps(tmp_path):
    stamps = _hours(6)
    rows = [f"{t},1,50" for k, t in enumerate(stamps) if k not in (2, 3)]
    series = load_hourly_csv(_csv(tmp_path, rows))[1]
    assert len(series) == 6
    assert list(np.flatnonzero(series.gaps)) == [2, 3]


def test_zones_mapped_onto_one_bus_add_up(tmp_path, case3):
    rows = [f"{t},101,20" for t in _hours(2)] + [f"{t},102,10" for t in _hours(2)]
    series = load_hourly_csv(_csv(tmp_path, rows), case3, {101: 3, 102: 3})
    np.testing.assert_allclose(series[3].values, [0.3, 0.3])


@pytest.mark.parametrize("rows", [
    ["yesterday,1,50"],
    ["2014-01-01T00:00:00Z,one,50"],
    ["2014-01-01T00:00:00Z,1,-5"],
    ["2014-01-01T00:00:00Z,1,50", "2014-01-01T00:00:00Z,1,51"],
    ["2014-01-01T00:00:00Z,1,50", "2014-01-01T00:30:00Z,1,50", "2014-01-01T01:00:00Z,1,50"],
])
def test_malformed_rows(tmp_path, rows):
    with pytest.raises(MalformedRow):
        load_hourly_csv(_csv(tmp_path, rows))


def test_missing_column(tmp_path):
    path = tmp_path / "loads.csv"
    path.write_text("timestamp_iso8601,bus_id\n2014-01-01T00:00:00Z,1\n")
    with pytest.raises(MalformedRow):
        load_hourly_csv(str(path))


def test_unknown_bus(tmp_path, case3):
    with pytest.raises(UnknownBus):
        load_hourly_csv(_csv(tmp_path, [f"{t},9,50" for t in _hours(2)]), case3)


def test_curve_fit_recovers_smooth_gap():
    k = np.arange(12.0)
    truth = 0.5 + 0.01 * k - 0.002 * k ** 2
    values = truth.copy()
    values[5:7] = np.nan
    filled = impute_curve_fit(_series(values), degree=3, window=8)
    np.testing.assert_allclose(filled.values, truth, atol=1e-9)
    assert list(np.flatnonzero(filled.imputed)) == [5, 6]
    assert filled.source == "imputed"
    assert not filled.has_gaps


def test_series_without_gaps_is_untouched():
    series = _series([0.1, 0.2, 0.3])
    assert impute_curve_fit(series) is series


@pytest.mark.parametrize("gap", [slice(0, 2), slice(10, 12), slice(1, 11)])
def test_gap_without_support_on_both_sides(gap):
    values = np.linspace(0.3, 0.5, 12)
    values[gap] = np.nan
    with pytest.raises(GapTooWide):
        impute_curve_fit(_series(values))


def test_resample_holds_each_reading_for_a_cycle():
    table = resample_consecutive(_series([0.1, 0.2, 0.3]), 4)
    np.testing.assert_allclose(table, [0.1] * 4 + [0.2] * 4 + [0.3] * 4)
    with pytest.raises(ValueError):
        resample_consecutive(_series([0.1, np.nan]), 4)
    with pytest.raises(ValueError):
        resample_consecutive(_series([0.1]), 0)


def test_synthetic_series_are_seeded():
    first = synth_load(0.9, 0.36, 0.0018, 288, seed=3)
    again = synth_load(0.9, 0.36, 0.0018, 288, seed=3)
    other = synth_load(0.9, 0.36, 0.0018, 288, seed=4)
    np.testing.assert_array_equal(first.values, again.values)
    assert not np.array_equal(first.values, other.values)
    assert first.source == "synthetic"
    assert np.all(first.values >= 0)
    assert abs(first.values.mean() - 0.9) < 0.01
    with pytest.raises(ValueError):
        synth_load(0.0, 0.1, 0.01, 10, seed=0)


def test_synthetic_loads_cover_measured_buses(case39):
    series = synthetic_loads(case39, {"days": 1, "samples_per_day": 24}, seed=0)
    assert sorted(series) == case39.measured_buses
    assert all(len(s) == 24 for s in series.values())


def test_round_robin_bus_mapping(case3, tmp_path):
    mapping = default_bus_mapping(case3, [9, 1, 7, 5])
    assert mapping == {1: 1, 5: 2, 7: 3, 9: 1}
    path = str(tmp_path / "mapping.json")
    save_bus_mapping(mapping, path)
    assert load_bus_mapping(path) == mapping


def test_load_table(case3, tmp_path):
    series = {1: _series([0.3, 0.31], 1), 3: _series([0.9, 0.95, 1.0], 3)}
    table = build_load_table(case3, series, 5)
    assert table.shape == (10, 3)
    np.testing.assert_allclose(table[:, 1], 0.0)
    np.testing.assert_allclose(cycle_series(table, 5)[:, 2], [0.9, 0.95])

    path = write_load_table(table, case3, str(tmp_path / "table.csv"))
    assert open(path).readline().strip() == "timeslot,bus_id,load_pu"
    np.testing.assert_allclose(read_load_table(path, case3), table)

    with pytest.raises(UnknownBus):
        build_load_table(case3, {7: _series([0.1], 7)}, 5)
    with pytest.raises(ValueError):
        build_load_table(case3, {}, 5)
