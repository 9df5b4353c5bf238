#!/usr/bin/env python3

"""
Small mixed-integer linear programming toolkit.

A MilpModel is a plain document of variables, linear rows, indicator
metadata and a linear objective (always minimized). Indicator constraints
are turned into big-M rows with M computed per row from the variable bounds.
LP relaxations are solved with scipy's HiGHS backend; binaries are handled by
a best-first branch and bound:

  - branch on the most fractional binary, lowest index on ties; the up
    branch is queued first and wins ties against its sibling
  - explore the open node with the lowest bound, deeper nodes first on ties,
    then creation order
  - stop when the best open bound is within gap_tol * (1 + |incumbent|)
"""

import heapq
import os
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import BigMTooSmall, MissingBounds, SolverError
from save_load import ensure_directory_exists, get_absolute_path, save_json_file
from utils.log import get_logger

logger = get_logger("optimizer")

SENSES = ("<=", "==", ">=")
INTEGRALITY_TOL = 1e-6
HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9}
# Values a branching binary is fixed to, in queueing order
BRANCH_ORDER = (1.0, 0.0)


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    TIME_LIMIT = "time_limit"


@dataclass
class Variable:
    index: int
    name: str
    lb: float
    ub: float
    binary: bool = False


@dataclass
class LinearConstraint:
    coeffs: Dict[int, float]
    sense: str
    rhs: float
    name: str = ""


@dataclass
class IndicatorConstraint:
    binary: int
    value: int
    row: LinearConstraint
    big_m: float


@dataclass(frozen=True)
class BigMConfig:
    big_m: float = 1e4
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.big_m <= 0 or self.epsilon <= 0 or self.epsilon >= self.big_m:
            raise ValueError("need 0 < epsilon << big_m")

    @classmethod
    def from_settings(cls, section: Dict[str, Any]) -> "BigMConfig":
        return cls(float(section.get("big_m", cls.big_m)), float(section.get("epsilon", cls.epsilon)))


@dataclass(frozen=True)
class SolveLimits:
    node_limit: int = 20000
    time_limit: float = 120.0   # seconds
    gap_tol: float = 1e-6
    feasibility_tol: float = 1e-6

    @classmethod
    def from_settings(cls, section: Dict[str, Any]) -> "SolveLimits":
        return cls(int(section.get("node_limit", cls.node_limit)),
                   float(section.get("time_limit", cls.time_limit)),
                   float(section.get("gap_tol", cls.gap_tol)),
                   float(section.get("feasibility_tol", cls.feasibility_tol)))


@dataclass
class MilpSolution:
    status: SolveStatus
    values: Optional[np.ndarray] = None
    objective: Optional[float] = None
    nodes: int = 0
    wall_time: float = 0.0
    bound: Optional[float] = None
    deterministic: bool = True

    @property
    def has_solution(self) -> bool:
        return self.values is not None

    def value(self, index: int) -> float:
        return float(self.values[index])


@dataclass
class MilpModel:
    name: str = "model"
    variables: List[Variable] = field(default_factory=list)
    constraints: List[LinearConstraint] = field(default_factory=list)
    indicators: List[IndicatorConstraint] = field(default_factory=list)
    objective: Dict[int, float] = field(default_factory=dict)
    objective_constant: float = 0.0

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def binaries(self) -> List[int]:
        return [v.index for v in self.variables if v.binary]

    def add_variable(self, name: str, lb: float = 0.0, ub: float = np.inf,
                     binary: bool = False) -> int:
        if binary:
            lb, ub = 0.0, 1.0
        if lb > ub:
            raise ValueError(f"variable {name}: lower bound {lb} above upper bound {ub}")
        index = len(self.variables)
        self.variables.append(Variable(index, name, float(lb), float(ub), binary))
        return index

    def add_binary(self, name: str) -> int:
        return self.add_variable(name, binary=True)

    def add_constraint(self, coeffs: Dict[int, float], sense: str, rhs: float,
                       name: str = "") -> LinearConstraint:
        if sense not in SENSES:
            raise ValueError(f"unknown sense {sense!r}")
        for index, value in coeffs.items():
            if not 0 <= index < len(self.variables):
                raise ValueError(f"constraint {name}: unknown variable {index}")
            if not np.isfinite(value):
                raise ValueError(f"constraint {name}: non-finite coefficient")
        row = LinearConstraint({i: float(v) for i, v in coeffs.items() if v != 0.0},
                               sense, float(rhs), name or f"c{len(self.constraints)}")
        self.constraints.append(row)
        return row

    def set_objective(self, coeffs: Dict[int, float], constant: float = 0.0) -> None:
        self.objective = {i: float(v) for i, v in coeffs.items() if v != 0.0}
        self.objective_constant = float(constant)

    def objective_value(self, values: np.ndarray) -> float:
        return self.objective_constant + sum(c * values[i] for i, c in self.objective.items())

    def max_violation(self, values: np.ndarray) -> float:
        """Largest row or bound violation of a point"""
        worst = 0.0
        for var in self.variables:
            worst = max(worst, var.lb - values[var.index], values[var.index] - var.ub)
        for row in self.constraints:
            activity = sum(c * values[i] for i, c in row.coeffs.items())
            if row.sense == "<=":
                worst = max(worst, activity - row.rhs)
            elif row.sense == ">=":
                worst = max(worst, row.rhs - activity)
            else:
                worst = max(worst, abs(activity - row.rhs))
        return worst


def _activity_range(model: MilpModel, coeffs: Dict[int, float]) -> Tuple[float, float]:
    """Interval arithmetic over the variable bounds"""
    low = high = 0.0
    for index, c in coeffs.items():
        var = model.variables[index]
        ends = (c * var.lb, c * var.ub) if c != 0 else (0.0, 0.0)
        low += min(ends)
        high += max(ends)
    return low, high


def required_big_m(model: MilpModel, coeffs: Dict[int, float], rhs: float) -> float:
    """Smallest M making coeffs . x <= rhs + M hold over the declared bounds (inf if unbounded)"""
    _, high = _activity_range(model, coeffs)
    return max(0.0, high - rhs)


def _check_binary(model: MilpModel, index: int) -> None:
    if not model.variables[index].binary:
        raise ValueError(f"variable {model.variables[index].name} is not binary")


def encode_indicator(model: MilpModel, binary: int, value: int, coeffs: Dict[int, float],
                     rhs: float, cfg: BigMConfig = BigMConfig(),
                     big_m: Optional[float] = None, name: str = "") -> Optional[LinearConstraint]:
    """
    Add big-M rows for  binary == value  ->  coeffs . x <= rhs

    Args:
        model: model to extend
        binary: index of the indicator binary
        value: 0 or 1, the triggering value
        coeffs, rhs: the conditional <= row
        cfg: fallback M for rows over unbounded variables, and epsilon
        big_m: explicit M; checked against the bounds

    Returns:
        The added row, or None when the row holds for every point in the bounds

    Raises:
        BigMTooSmall: an explicit M leaves the row binding at the other value
    """
    _check_binary(model, binary)
    if value not in (0, 1):
        raise ValueError("indicator value must be 0 or 1")
    needed = required_big_m(model, coeffs, rhs)
    if big_m is None:
        if not np.isfinite(needed):
            logger.warning("indicator %s over unbounded variables, using M=%g", name, cfg.big_m)
            m = cfg.big_m
        else:
            m = needed
    else:
        if big_m < needed:
            raise BigMTooSmall(f"indicator {name}: M={big_m} but bounds need {needed}")
        m = float(big_m)
    model.indicators.append(IndicatorConstraint(binary, value, LinearConstraint(dict(coeffs), "<=", rhs, name), m))
    if m == 0.0:
        return None
    row = dict(coeffs)
    if value == 1:
        # coeffs . x <= rhs + M (1 - b)
        row[binary] = row.get(binary, 0.0) + m
        return model.add_constraint(row, "<=", rhs + m, name)
    # coeffs . x <= rhs + M b
    row[binary] = row.get(binary, 0.0) - m
    return model.add_constraint(row, "<=", rhs, name)


def encode_strict_greater(model: MilpModel, binary: int, coeffs: Dict[int, float], threshold: float,
                          cfg: BigMConfig = BigMConfig(), name: str = "") -> None:
    """binary == 1  <->  coeffs . x > threshold, strictness taken as >= threshold + epsilon"""
    negated = {i: -c for i, c in coeffs.items()}
    encode_indicator(model, binary, 1, negated, -(threshold + cfg.epsilon), cfg, name=f"{name}_gt")
    encode_indicator(model, binary, 0, coeffs, threshold, cfg, name=f"{name}_le")


def encode_equal_if(model: MilpModel, binary: int, value: int, coeffs: Dict[int, float],
                    rhs: float, cfg: BigMConfig = BigMConfig(), name: str = "") -> None:
    """binary == value  ->  coeffs . x == rhs"""
    encode_indicator(model, binary, value, coeffs, rhs, cfg, name=f"{name}_ub")
    encode_indicator(model, binary, value, {i: -c for i, c in coeffs.items()}, -rhs, cfg, name=f"{name}_lb")


def encode_if_then_else(model: MilpModel, condition: Dict[int, float], threshold: float,
                        target: int, then_value: float, else_value: float,
                        cfg: BigMConfig = BigMConfig(), name: str = "ite") -> int:
    """
    target = then_value if condition . x > threshold else else_value

    Returns:
        Index of the auxiliary binary that records the comparison
    """
    flag = model.add_binary(f"{name}_flag")
    encode_strict_greater(model, flag, condition, threshold, cfg, name)
    encode_equal_if(model, flag, 1, {target: 1.0}, then_value, cfg, name=f"{name}_then")
    encode_equal_if(model, flag, 0, {target: 1.0}, else_value, cfg, name=f"{name}_else")
    return flag


def encode_and(model: MilpModel, out: int, ins: Sequence[int], name: str = "and") -> None:
    """out = AND(ins): out <= in_i, out >= sum(ins) - (n - 1)"""
    for index in (out, *ins):
        _check_binary(model, index)
    for k, index in enumerate(ins):
        model.add_constraint({out: 1.0, index: -1.0}, "<=", 0.0, f"{name}_le{k}")
    row = {index: -1.0 for index in ins}
    row[out] = 1.0
    model.add_constraint(row, ">=", -(len(ins) - 1.0), f"{name}_ge")


def encode_or(model: MilpModel, out: int, ins: Sequence[int], name: str = "or") -> None:
    """out = OR(ins): out >= in_i, out <= sum(ins)"""
    for index in (out, *ins):
        _check_binary(model, index)
    for k, index in enumerate(ins):
        model.add_constraint({out: 1.0, index: -1.0}, ">=", 0.0, f"{name}_ge{k}")
    row = {index: -1.0 for index in ins}
    row[out] = 1.0
    model.add_constraint(row, "<=", 0.0, f"{name}_le")


@dataclass
class _Compiled:
    c: np.ndarray
    a_ub: Optional[csr_matrix]
    b_ub: Optional[np.ndarray]
    a_eq: Optional[csr_matrix]
    b_eq: Optional[np.ndarray]
    lb: np.ndarray
    ub: np.ndarray
    binaries: np.ndarray


def _compile(model: MilpModel) -> _Compiled:
    n = model.n_variables
    c = np.zeros(n)
    for i, coef in model.objective.items():
        c[i] = coef
    ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    for row in model.constraints:
        sign = -1.0 if row.sense == ">=" else 1.0
        if row.sense == "==":
            r = len(b_eq)
            for i, coef in row.coeffs.items():
                eq_rows.append(r)
                eq_cols.append(i)
                eq_vals.append(coef)
            b_eq.append(row.rhs)
        else:
            r = len(b_ub)
            for i, coef in row.coeffs.items():
                ub_rows.append(r)
                ub_cols.append(i)
                ub_vals.append(sign * coef)
            b_ub.append(sign * row.rhs)
    a_ub = csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(len(b_ub), n)) if b_ub else None
    a_eq = csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(b_eq), n)) if b_eq else None
    return _Compiled(
        c=c,
        a_ub=a_ub,
        b_ub=np.array(b_ub) if b_ub else None,
        a_eq=a_eq,
        b_eq=np.array(b_eq) if b_eq else None,
        lb=np.array([v.lb for v in model.variables]),
        ub=np.array([v.ub for v in model.variables]),
        binaries=np.array(model.binaries, dtype=int),
    )


def _solve_relaxation(compiled: _Compiled, lb: np.ndarray, ub: np.ndarray,
                      constant: float) -> Tuple[SolveStatus, Optional[np.ndarray], Optional[float]]:
    bounds = [(None if np.isinf(lo) else lo, None if np.isinf(hi) else hi) for lo, hi in zip(lb, ub)]
    res = linprog(compiled.c, A_ub=compiled.a_ub, b_ub=compiled.b_ub, A_eq=compiled.a_eq,
                  b_eq=compiled.b_eq, bounds=bounds, method="highs", options=HIGHS_OPTIONS)
    if res.status == 0:
        return SolveStatus.OPTIMAL, np.asarray(res.x, dtype=float), float(res.fun) + constant
    if res.status == 2:
        return SolveStatus.INFEASIBLE, None, None
    if res.status == 3:
        return SolveStatus.UNBOUNDED, None, None
    raise SolverError(f"LP backend stopped with status {res.status}: {res.message}")


def solve_lp(model: MilpModel) -> MilpSolution:
    """
    Solve the LP relaxation (binaries relaxed to [0, 1])

    Infeasible and unbounded problems are reported through the status.
    """
    if model.n_variables == 0:
        raise ValueError("model has no variables")
    start = time.perf_counter()
    compiled = _compile(model)
    status, x, obj = _solve_relaxation(compiled, compiled.lb, compiled.ub, model.objective_constant)
    return MilpSolution(status, x, obj, nodes=1, wall_time=time.perf_counter() - start, bound=obj)


def _most_fractional(x: np.ndarray, binaries: np.ndarray) -> Optional[int]:
    if binaries.size == 0:
        return None
    values = x[binaries]
    distance = np.abs(values - np.round(values))
    if distance.max() <= INTEGRALITY_TOL:
        return None
    # closest to 0.5 wins; argmin returns the first, i.e. lowest index
    score = np.abs(values - 0.5)
    score[distance <= INTEGRALITY_TOL] = np.inf
    return int(binaries[int(np.argmin(score))])


def solve_milp(model: MilpModel, limits: SolveLimits = SolveLimits()) -> MilpSolution:
    """
    Best-first branch and bound over the binaries

    Returns:
        MilpSolution with status OPTIMAL, INFEASIBLE, UNBOUNDED (any relaxation
        unbounded), or TIME_LIMIT carrying the incumbent if one was found

    Raises:
        MissingBounds: a continuous variable has an infinite bound
    """
    for var in model.variables:
        if not var.binary and not (np.isfinite(var.lb) and np.isfinite(var.ub)):
            raise MissingBounds(f"variable {var.name} needs finite bounds")
    start = time.perf_counter()
    compiled = _compile(model)
    constant = model.objective_constant

    incumbent: Optional[np.ndarray] = None
    incumbent_obj = np.inf
    nodes = 0
    sequence = 0
    open_nodes: List[Tuple[float, int, int, np.ndarray, np.ndarray, np.ndarray]] = []

    def evaluate(lb, ub, depth):
        nonlocal nodes, sequence, incumbent, incumbent_obj
        nodes += 1
        status, x, obj = _solve_relaxation(compiled, lb, ub, constant)
        if status is SolveStatus.UNBOUNDED:
            return status
        if status is not SolveStatus.OPTIMAL or obj >= incumbent_obj - _gap(incumbent_obj, limits):
            return status
        branch = _most_fractional(x, compiled.binaries)
        if branch is None:
            x = x.copy()
            x[compiled.binaries] = np.round(x[compiled.binaries])
            incumbent, incumbent_obj = x, obj
            logger.debug("node %d: incumbent %.9g", nodes, obj)
        else:
            sequence += 1
            heapq.heappush(open_nodes, (obj, -depth, sequence, lb, ub, x))
        return status

    root_status = evaluate(compiled.lb.copy(), compiled.ub.copy(), 0)
    if root_status is SolveStatus.UNBOUNDED:
        return MilpSolution(SolveStatus.UNBOUNDED, nodes=nodes, wall_time=time.perf_counter() - start)

    timed_out = False
    best_bound = incumbent_obj
    while open_nodes:
        bound, neg_depth, _, lb, ub, x = open_nodes[0]
        best_bound = bound
        if bound >= incumbent_obj - _gap(incumbent_obj, limits):
            break
        if nodes >= limits.node_limit or time.perf_counter() - start > limits.time_limit:
            timed_out = True
            break
        heapq.heappop(open_nodes)
        j = _most_fractional(x, compiled.binaries)
        # up child first, so it carries the lower creation number on equal bounds
        for fixed in BRANCH_ORDER:
            child_lb, child_ub = lb.copy(), ub.copy()
            child_lb[j] = child_ub[j] = fixed
            if evaluate(child_lb, child_ub, -neg_depth + 1) is SolveStatus.UNBOUNDED:
                logger.warning("%s: unbounded relaxation at node %d", model.name, nodes)
                return MilpSolution(SolveStatus.UNBOUNDED, nodes=nodes, wall_time=time.perf_counter() - start)
    else:
        best_bound = incumbent_obj

    wall = time.perf_counter() - start
    logger.debug("%s: %d nodes in %.3fs", model.name, nodes, wall)
    if timed_out:
        logger.warning("%s: node/time limit reached after %d nodes", model.name, nodes)
        return MilpSolution(SolveStatus.TIME_LIMIT, incumbent,
                            None if incumbent is None else incumbent_obj, nodes, wall, best_bound)
    if incumbent is None:
        return MilpSolution(SolveStatus.INFEASIBLE, nodes=nodes, wall_time=wall)
    return MilpSolution(SolveStatus.OPTIMAL, incumbent, incumbent_obj, nodes, wall, best_bound)


def _gap(incumbent_obj: float, limits: SolveLimits) -> float:
    if not np.isfinite(incumbent_obj):
        return 0.0
    return limits.gap_tol * (1.0 + abs(incumbent_obj))


def _lp_name(model: MilpModel, index: int) -> str:
    raw = model.variables[index].name or f"x{index}"
    cleaned = "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in raw)
    return f"v{index}_{cleaned}"


def _lp_terms(model: MilpModel, coeffs: Dict[int, float]) -> str:
    if not coeffs:
        return "0 " + _lp_name(model, 0)
    parts = []
    for i, c in sorted(coeffs.items()):
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {abs(c)!r} {_lp_name(model, i)}")
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def export_lp(model: MilpModel, path: str) -> str:
    """Write the model in CPLEX LP text format for cross-checking with other solvers"""
    lines = [f"\\ {model.name}", "Minimize", f" obj: {_lp_terms(model, model.objective)}"]
    if model.objective_constant:
        lines.append(f"\\ objective constant {model.objective_constant!r}")
    lines.append("Subject To")
    for k, row in enumerate(model.constraints):
        sense = "=" if row.sense == "==" else row.sense
        lines.append(f" r{k}: {_lp_terms(model, row.coeffs)} {sense} {row.rhs!r}")
    lines.append("Bounds")
    for var in model.variables:
        if var.binary:
            continue
        lo = "-inf" if np.isinf(var.lb) else repr(var.lb)
        hi = "+inf" if np.isinf(var.ub) else repr(var.ub)
        lines.append(f" {lo} <= {_lp_name(model, var.index)} <= {hi}")
    binaries = [_lp_name(model, i) for i in model.binaries]
    if binaries:
        lines.append("Binaries")
        lines.extend(f" {name}" for name in binaries)
    lines.append("End")
    abs_path = get_absolute_path(path)
    ensure_directory_exists(abs_path)
    with open(abs_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return abs_path


def solution_to_dict(model: MilpModel, solution: MilpSolution) -> Dict[str, Any]:
    values = {}
    if solution.values is not None:
        values = {var.name or f"x{var.index}": float(solution.values[var.index]) for var in model.variables}
    return {
        "status": solution.status.value,
        "objective": solution.objective,
        "vars": values,
        "nodes": solution.nodes,
        "wall_ms": round(solution.wall_time * 1000.0, 3),
    }


def export_solution(model: MilpModel, solution: MilpSolution, path: str) -> bool:
    """Solution JSON: {status, objective, vars, nodes, wall_ms}"""
    return save_json_file(path, solution_to_dict(model, solution))
