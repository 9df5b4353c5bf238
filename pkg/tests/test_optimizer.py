import itertools
import json

import numpy as np
import pytest
from scipy.optimize import Bounds, LinearConstraint as ScipyConstraint, linprog, milp

import optimizer.optimizer as optimizer_module
from errors import BigMTooSmall, MissingBounds
from optimizer.optimizer import (
    BigMConfig,
    MilpModel,
    SolveLimits,
    SolveStatus,
    encode_and,
    encode_equal_if,
    encode_if_then_else,
    encode_indicator,
    encode_or,
    encode_strict_greater,
    export_lp,
    export_solution,
    required_big_m,
    solve_lp,
    solve_milp,
)


def _random_instance(rng, n_bin, n_cont=2, n_rows=4):
    """A feasible bounded MILP as (model, c, A, b, integrality, ub)"""
    n = n_bin + n_cont
    ub = np.concatenate([np.ones(n_bin), np.full(n_cont, 5.0)])
    integrality = np.concatenate([np.ones(n_bin), np.zeros(n_cont)])
    a = rng.integers(-5, 6, size=(n_rows, n)).astype(float)
    x_feasible = np.concatenate([rng.integers(0, 2, n_bin), rng.uniform(0, 5, n_cont)])
    b = a @ x_feasible + rng.uniform(0.0, 3.0, n_rows)
    c = rng.integers(-9, 10, size=n).astype(float)

    model = MilpModel(name="random")
    for k in range(n_bin):
        model.add_binary(f"b{k}")
    for k in range(n_cont):
        model.add_variable(f"x{k}", 0.0, 5.0)
    for r in range(n_rows):
        model.add_constraint({i: a[r, i] for i in range(n)}, "<=", b[r])
    model.set_objective({i: c[i] for i in range(n)})
    return model, c, a, b, integrality, ub


def _brute_force(c, a, b, n_bin, ub):
    best = np.inf
    n = len(c)
    for assignment in itertools.product((0.0, 1.0), repeat=n_bin):
        bounds = [(v, v) for v in assignment] + [(0.0, ub[i]) for i in range(n_bin, n)]
        res = linprog(c, A_ub=a, b_ub=b, bounds=bounds, method="highs")
        if res.status == 0:
            best = min(best, res.fun)
    return best


def test_random_milps_match_scipy_milp():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n_bin = int(rng.integers(1, 13))
        model, c, a, b, integrality, ub = _random_instance(rng, n_bin)
        ours = solve_milp(model)
        reference = milp(c, constraints=ScipyConstraint(a, -np.inf, b), integrality=integrality,
                         bounds=Bounds(np.zeros(len(c)), ub))
        assert ours.status is SolveStatus.OPTIMAL
        assert ours.objective == pytest.approx(reference.fun, abs=1e-6)
        assert model.max_violation(ours.values) <= 1e-6


def test_small_milps_match_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(15):
        n_bin = int(rng.integers(1, 7))
        model, c, a, b, _, ub = _random_instance(rng, n_bin)
        assert solve_milp(model).objective == pytest.approx(_brute_force(c, a, b, n_bin, ub), abs=1e-6)


def _indicator_model():
    model = MilpModel()
    flag = model.add_binary("flag")
    x = model.add_variable("x", 0.0, 10.0)
    return model, flag, x


def _max_x_with_flag(model, flag, x, value):
    model.add_constraint({flag: 1.0}, "==", value, "fix")
    model.set_objective({x: -1.0})
    solution = solve_milp(model)
    model.constraints.pop()
    return solution


def test_indicator_relaxes_only_when_off():
    model, flag, x = _indicator_model()
    row = encode_indicator(model, flag, 1, {x: 1.0}, 3.0)
    assert row is not None
    # tight M from the bounds: 10 - 3
    assert row.coeffs[flag] == pytest.approx(7.0)
    assert -_max_x_with_flag(model, flag, x, 1).objective == pytest.approx(3.0)
    assert -_max_x_with_flag(model, flag, x, 0).objective == pytest.approx(10.0)


def test_indicator_on_zero_value():
    model, flag, x = _indicator_model()
    encode_indicator(model, flag, 0, {x: 1.0}, 4.0)
    assert -_max_x_with_flag(model, flag, x, 0).objective == pytest.approx(4.0)
    assert -_max_x_with_flag(model, flag, x, 1).objective == pytest.approx(10.0)


def test_redundant_indicator_adds_no_row():
    model, flag, x = _indicator_model()
    assert encode_indicator(model, flag, 1, {x: 1.0}, 20.0) is None
    assert model.constraints == []
    assert len(model.indicators) == 1


def test_explicit_big_m_is_checked():
    model, flag, x = _indicator_model()
    assert required_big_m(model, {x: 1.0}, 3.0) == pytest.approx(7.0)
    with pytest.raises(BigMTooSmall):
        encode_indicator(model, flag, 1, {x: 1.0}, 3.0, big_m=5.0)
    encode_indicator(model, flag, 1, {x: 1.0}, 3.0, big_m=100.0)


def test_strict_greater_semantics():
    cfg = BigMConfig(epsilon=1e-6)
    for value, expected in ((5.0, 1.0), (3.0, 0.0), (0.0, 0.0), (3.001, 1.0)):
        model, flag, x = _indicator_model()
        encode_strict_greater(model, flag, {x: 1.0}, 3.0, cfg)
        model.add_constraint({x: 1.0}, "==", value)
        solution = solve_milp(model)
        assert solution.status is SolveStatus.OPTIMAL
        assert solution.value(flag) == expected
    # strictly between the threshold and threshold + epsilon nothing fits
    model, flag, x = _indicator_model()
    encode_strict_greater(model, flag, {x: 1.0}, 3.0, cfg)
    model.add_constraint({x: 1.0}, "==", 3.0 + 5e-7)
    assert solve_milp(model).status is SolveStatus.INFEASIBLE


def test_equal_if():
    model, flag, x = _indicator_model()
    encode_equal_if(model, flag, 1, {x: 1.0}, 6.0)
    model.add_constraint({flag: 1.0}, "==", 1.0)
    model.set_objective({x: 1.0})
    assert solve_milp(model).value(x) == pytest.approx(6.0)


def test_if_then_else():
    for condition, expected in ((4.0, 7.0), (1.0, -1.0)):
        model = MilpModel()
        x = model.add_variable("x", 0.0, 10.0)
        target = model.add_variable("target", -10.0, 10.0)
        flag = encode_if_then_else(model, {x: 1.0}, 2.0, target, 7.0, -1.0)
        model.add_constraint({x: 1.0}, "==", condition)
        solution = solve_milp(model)
        assert solution.value(target) == pytest.approx(expected)
        assert solution.value(flag) == (1.0 if expected == 7.0 else 0.0)


@pytest.mark.parametrize("encoder, truth", [(encode_and, all), (encode_or, any)])
def test_logic_gates_exhaustively(encoder, truth):
    for assignment in itertools.product((0.0, 1.0), repeat=3):
        values = []
        for direction in (1.0, -1.0):
            model = MilpModel()
            ins = [model.add_binary(f"in{k}") for k in range(3)]
            out = model.add_binary("out")
            encoder(model, out, ins)
            for index, value in zip(ins, assignment):
                model.add_constraint({index: 1.0}, "==", value)
            model.set_objective({out: direction})
            values.append(solve_milp(model).value(out))
        assert values == [float(truth(assignment))] * 2


def test_lp_statuses():
    model = MilpModel()
    x = model.add_variable("x", 0.0, np.inf)
    model.set_objective({x: -1.0})
    assert solve_lp(model).status is SolveStatus.UNBOUNDED
    model.add_constraint({x: 1.0}, "<=", -1.0)
    assert solve_lp(model).status is SolveStatus.INFEASIBLE


def test_branch_and_bound_needs_finite_bounds():
    model = MilpModel()
    model.add_variable("x", 0.0, np.inf)
    model.add_binary("b")
    with pytest.raises(MissingBounds):
        solve_milp(model)


def test_infeasible_milp():
    model, flag, x = _indicator_model()
    encode_indicator(model, flag, 1, {x: 1.0}, 3.0)
    model.add_constraint({x: 1.0}, ">=", 5.0)
    model.add_constraint({flag: 1.0}, ">=", 1.0)
    solution = solve_milp(model)
    assert solution.status is SolveStatus.INFEASIBLE
    assert not solution.has_solution


def _half_knapsack():
    # relaxation optimum has one binary at 0.5
    model = MilpModel()
    a, b = model.add_binary("a"), model.add_binary("b")
    model.add_constraint({a: 2.0, b: 2.0}, "<=", 3.0)
    model.set_objective({a: -1.0, b: -1.0})
    return model


def _recording_relaxation(monkeypatch, child_status=None):
    real = optimizer_module._solve_relaxation
    calls = []

    def relaxation(compiled, lb, ub, constant):
        calls.append((lb.copy(), ub.copy()))
        if child_status is not None and len(calls) > 1:
            return child_status, None, None
        return real(compiled, lb, ub, constant)

    monkeypatch.setattr(optimizer_module, "_solve_relaxation", relaxation)
    return calls


def test_up_branch_is_evaluated_first(monkeypatch):
    calls = _recording_relaxation(monkeypatch)
    solution = solve_milp(_half_knapsack())
    assert solution.status is SolveStatus.OPTIMAL
    assert solution.objective == pytest.approx(-1.0)
    (root_lb, root_ub), (up_lb, up_ub), (down_lb, down_ub) = calls[:3]
    branched = np.flatnonzero((up_lb != root_lb) | (up_ub != root_ub))
    assert len(branched) == 1
    j = branched[0]
    assert up_lb[j] == up_ub[j] == 1.0
    assert down_lb[j] == down_ub[j] == 0.0


def test_unbounded_child_relaxation_is_reported(monkeypatch):
    calls = _recording_relaxation(monkeypatch, SolveStatus.UNBOUNDED)
    solution = solve_milp(_half_knapsack())
    assert solution.status is SolveStatus.UNBOUNDED
    assert not solution.has_solution
    assert len(calls) == 2


def test_node_limit_reports_time_limit():
    rng = np.random.default_rng(3)
    model, *_ = _random_instance(rng, 12, n_rows=6)
    solution = solve_milp(model, SolveLimits(node_limit=1))
    assert solution.status in (SolveStatus.TIME_LIMIT, SolveStatus.OPTIMAL)
    if solution.status is SolveStatus.TIME_LIMIT:
        assert solution.nodes >= 1


def test_constraint_validation():
    model = MilpModel()
    x = model.add_variable("x", 0.0, 1.0)
    with pytest.raises(ValueError):
        model.add_constraint({x: 1.0}, "<", 1.0)
    with pytest.raises(ValueError):
        model.add_constraint({5: 1.0}, "<=", 1.0)
    with pytest.raises(ValueError):
        model.add_constraint({x: np.nan}, "<=", 1.0)
    with pytest.raises(ValueError):
        encode_indicator(model, x, 1, {x: 1.0}, 0.5)


def test_exports(tmp_path):
    model, flag, x = _indicator_model()
    encode_indicator(model, flag, 1, {x: 1.0}, 3.0)
    model.set_objective({x: -1.0, flag: -5.0})
    lp_text = open(export_lp(model, str(tmp_path / "model.lp"))).read()
    assert lp_text.startswith("\\ model")
    assert "Binaries" in lp_text and "Subject To" in lp_text
    solution = solve_milp(model)
    assert solution.objective == pytest.approx(-8.0)
    path = str(tmp_path / "solution.json")
    export_solution(model, solution, path)
    data = json.load(open(path))
    assert data["status"] == "optimal"
    assert data["vars"]["flag"] == 1.0
    assert set(data) == {"status", "objective", "vars", "nodes", "wall_ms"}
