import numpy as np
import pytest
from scipy.optimize import linprog

from adm.adm import (
    AdmModel,
    BddRule,
    ClusterHull,
    bdd_check,
    check_perception,
    detector_complexity,
    hull_from_points,
    is_benign,
    load_adm,
    save_adm,
    train_dbscan,
    windows,
)
from errors import AllNoise, DegenerateCluster, InsufficientData


def _in_convex_hull(vertices, point):
    """Exact oracle: point is a convex combination of the vertices"""
    m = len(vertices)
    a_eq = np.vstack([vertices.T, np.ones((1, m))])
    b_eq = np.append(point, 1.0)
    res = linprog(np.zeros(m), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * m, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10})
    return res.status == 0


def test_windows_are_oldest_first():
    np.testing.assert_allclose(windows([1.0, 2.0, 3.0, 4.0], 1), [[1, 2], [2, 3], [3, 4]])
    assert windows(np.arange(10.0), 2).shape == (8, 3)


def test_square_hull():
    hull = hull_from_points(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]))
    assert len(hull.vertices) == 4
    assert len(hull.hyperplanes) == 4
    assert hull.contains([0.5, 0.5])
    assert hull.contains([1.0, 1.0])
    assert not hull.contains([1.01, 0.5])
    assert not hull.contains([-0.01, -0.01])
    np.testing.assert_allclose(np.linalg.norm(hull.hyperplanes[:, :2], axis=1), 1.0)


def test_collinear_cluster_is_thickened():
    points = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    hull = hull_from_points(points, margin=1e-3)
    assert all(hull.contains(p) for p in points)
    assert not hull.contains([0.0, 1.0])
    with pytest.raises(DegenerateCluster):
        hull_from_points(points, margin=None)


def test_single_point_cluster_is_thickened():
    hull = hull_from_points(np.array([[0.5, 0.5]] * 5), margin=1e-3)
    assert hull.contains([0.5, 0.5])
    assert not hull.contains([0.51, 0.5])


def test_short_series_is_insufficient():
    with pytest.raises(InsufficientData):
        train_dbscan([0.1, 0.2, 0.3, 0.4, 0.5], eps=0.1, min_pts=4, lookback=1)


def test_spread_out_series_is_all_noise():
    with pytest.raises(AllNoise):
        train_dbscan(np.arange(20.0), eps=0.01, min_pts=4, lookback=1)


def test_two_regimes_give_two_clusters(rng):
    low = 0.3 + rng.normal(0.0, 0.001, 60)
    high = 0.8 + rng.normal(0.0, 0.001, 60)
    clusters = train_dbscan(np.concatenate([low, high]), eps=0.02, min_pts=4, lookback=1)
    assert len(clusters) == 2


def test_trained_hulls_cover_their_clusters(training_series, desk_adm):
    for bus, series in training_series.items():
        clusters = train_dbscan(series, eps=desk_adm.dbscan_eps, min_pts=4, lookback=1)
        hulls = desk_adm.per_bus[bus]
        for cluster in clusters:
            assert all(any(h.contains(p) for h in hulls) for p in cluster)


def test_membership_agrees_with_convex_combination_oracle(desk_adm, rng):
    for hulls in desk_adm.per_bus.values():
        for hull in hulls:
            low, high = hull.vertices.min(axis=0), hull.vertices.max(axis=0)
            span = high - low
            points = rng.uniform(low - 0.1 * span, high + 0.1 * span, size=(1000, 2))
            for point in points:
                assert hull.contains(point) == _in_convex_hull(hull.vertices, point)


def test_operating_point_is_benign(case3, desk_adm):
    for bus in case3.measured_buses:
        base = case3.base_loads[bus - 1]
        assert is_benign(desk_adm, bus, [base, base])
        # a sudden halving of the load is far outside the daily pattern
        assert not is_benign(desk_adm, bus, [base, 0.5 * base])


def test_check_perception_flags_only_anomalous_buses(case3, desk_adm):
    base = case3.base_loads
    history = np.vstack([base, base])
    assert check_perception(desk_adm, history, case3.bus_ids) == []
    history[1, 2] = 0.5 * base[2]
    assert check_perception(desk_adm, history, case3.bus_ids) == [3]


def test_untrained_bus_is_always_benign():
    model = AdmModel({}, lookback=1)
    assert is_benign(model, 7, [0.0, 100.0])
    with pytest.raises(ValueError):
        is_benign(model, 7, [0.0, 1.0, 2.0])


def test_bdd_boundary_is_inclusive():
    rule = BddRule(0.04)
    assert bdd_check(rule, 0.5, 0.54)
    assert bdd_check(rule, 0.54, 0.5)
    assert not bdd_check(rule, 0.5, 0.5401)
    with pytest.raises(ValueError):
        BddRule(0.0)


def test_model_file_round_trip(desk_adm, tmp_path):
    path = str(tmp_path / "adm.json")
    save_adm(desk_adm, path)
    again = load_adm(path)
    assert sorted(again.per_bus) == sorted(desk_adm.per_bus)
    assert again.lookback == desk_adm.lookback
    for bus, hulls in desk_adm.per_bus.items():
        for h, hull in enumerate(hulls):
            np.testing.assert_allclose(again.per_bus[bus][h].hyperplanes, hull.hyperplanes)


def test_complexity_rows(desk_adm):
    rows = detector_complexity(desk_adm, 3024)
    assert [r["stage"] for r in rows] == ["dbscan_training", "hull_construction", "membership"]
    assert rows[0]["size"] == 3024


def test_hull_dimension():
    hull = ClusterHull(np.zeros((3, 2)), np.zeros((3, 3)))
    assert hull.dimension == 2
