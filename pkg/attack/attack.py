#!/usr/bin/env python3

"""
False data injection attack synthesis against the LFC loop.

The attack MILP contains the closed loop over the attack window:

  - one packed plant state per timeslot, tied together by the simulator's own
    Backward-Euler rows (dynamics.StepSystem)
  - per LFC cycle the controller's view: estimated generator angles, the DC
    flow on perceived loads, estimated generation and the reference setpoints
  - per LFC cycle and bus the injected load offset, zero where the attacker
    has no access
  - detector rows: the BDD step bound, or ADM hull membership with a one-hot
    hull selector per (bus, cycle) when a bus has several hulls
  - relay goal binaries chained into a "not yet tripped" counter whose sum is
    minimized, so the optimum trips at the earliest timeslot

Benign loads are constant over the window; the plant always sees them and
only the controller sees the injections.
"""

import itertools
import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from adm.adm import AdmModel, BddRule, bdd_check, check_perception, is_benign
from dynamics.dynamics import (
    GridState,
    RelayEvent,
    SimConfig,
    Trajectory,
    build_step_system,
    first_trip,
    pack_state,
    run_horizon,
    unpack_state,
)
from errors import CombinatorialBudgetExceeded, MalformedCase, ModelTooLarge, SolverError, VerificationMismatch
from grid_model.grid_model import NetworkModel, RelayConfig
from lfc.lfc import LfcPolicy
from optimizer.optimizer import (
    BigMConfig,
    MilpModel,
    MilpSolution,
    SolveLimits,
    SolveStatus,
    encode_indicator,
    solve_milp,
)
from save_load import load_json_file, save_json_file
from utils.log import get_logger

logger = get_logger("attack")

DETECTOR_MODES = ("none", "rules_bdd", "ml_adm")
GOALS = ("uf", "of", "either")
TRIP_TOLERANCE = 2        # timeslots between predicted and replayed trip
STATE_TOLERANCE = 1e-5    # p.u. between MILP states and the replay
ANGLE_BOUND = 10.0        # rad

Detector = Union[AdmModel, BddRule, None]


@dataclass(frozen=True)
class AdversaryModel:
    """
    What the attacker can touch.

    `accessibility` has one flag per bus (bus id order). Only buses with a load
    measurement, i.e. a nonzero base load, can actually carry an injection.
    """
    accessibility: Tuple[bool, ...]
    attack_start: int = 0
    max_duration: int = 30
    detector_mode: str = "rules_bdd"

    def __post_init__(self):
        if self.max_duration < 1:
            raise ValueError("max_duration must be at least 1 LFC cycle")
        if self.attack_start < 0:
            raise ValueError("attack_start must be a non-negative LFC cycle")
        if self.detector_mode not in DETECTOR_MODES:
            raise ValueError(f"unknown detector mode {self.detector_mode!r}")

    @classmethod
    def from_buses(cls, network: NetworkModel, buses: Sequence[int], **kwargs) -> "AdversaryModel":
        unknown = set(buses) - set(network.bus_ids)
        if unknown:
            raise ValueError(f"unknown buses {sorted(unknown)}")
        return cls(tuple(bus in set(buses) for bus in network.bus_ids), **kwargs)

    def accessible_buses(self, network: NetworkModel) -> List[int]:
        if len(self.accessibility) != network.n_buses:
            raise ValueError(f"accessibility has {len(self.accessibility)} entries "
                             f"for {network.n_buses} buses")
        return [bus for bus, flag in zip(network.bus_ids, self.accessibility) if flag]

    def attackable_buses(self, network: NetworkModel) -> List[int]:
        measured = set(network.measured_buses)
        return [bus for bus in self.accessible_buses(network) if bus in measured]


@dataclass(frozen=True)
class AttackConfig:
    injection_bound: float = 0.5          # p.u. per bus and cycle
    omega_injection: bool = False
    omega_injection_bound: float = 0.005  # p.u.
    trip_margin: float = 1e-5             # p.u. beyond the relay threshold
    hull_margin: float = 1e-6
    bdd_margin: float = 1e-6
    omega_bounds: Tuple[float, float] = (0.9, 1.1)
    max_variables: int = 250000
    resiliency_exact_limit: int = 10
    resiliency_samples: int = 50

    @classmethod
    def from_settings(cls, section: Dict[str, Any]) -> "AttackConfig":
        return cls(
            injection_bound=float(section.get("injection_bound", cls.injection_bound)),
            omega_injection=bool(section.get("omega_injection", cls.omega_injection)),
            omega_injection_bound=float(section.get("omega_injection_bound", cls.omega_injection_bound)),
            trip_margin=float(section.get("trip_margin", cls.trip_margin)),
            hull_margin=float(section.get("hull_margin", cls.hull_margin)),
            bdd_margin=float(section.get("bdd_margin", cls.bdd_margin)),
            omega_bounds=tuple(section.get("omega_bounds", cls.omega_bounds)),
            max_variables=int(section.get("max_variables", cls.max_variables)),
            resiliency_exact_limit=int(section.get("resiliency_exact_limit", cls.resiliency_exact_limit)),
            resiliency_samples=int(section.get("resiliency_samples", cls.resiliency_samples)),
        )


@dataclass
class AttackVector:
    """
    Injected offsets keyed by (bus id, absolute LFC cycle).

    Offsets exist only inside [start_cycle, start_cycle + n_cycles) and only at
    accessible buses; the controller perceives benign + offset there.
    """
    start_cycle: int
    n_cycles: int
    injections: Dict[Tuple[int, int], float]
    omega_injections: Dict[Tuple[int, int], float] = field(default_factory=dict)
    detector_mode: str = "none"
    goal: str = "uf"
    predicted_trip_timeslot: Optional[int] = None

    @property
    def end_cycle(self) -> int:
        """First cycle after the window"""
        return self.start_cycle + self.n_cycles

    @property
    def buses(self) -> List[int]:
        return sorted({bus for bus, _ in self.injections})

    def in_window(self, cycle: int) -> bool:
        return self.start_cycle <= cycle < self.end_cycle

    def load_offsets(self, cycle: int, network: NetworkModel) -> Optional[np.ndarray]:
        if not self.in_window(cycle):
            return None
        offsets = np.zeros(network.n_buses)
        for (bus, c), value in self.injections.items():
            if c == cycle:
                offsets[bus - 1] = value
        return offsets

    def omega_offsets(self, cycle: int, network: NetworkModel) -> Optional[np.ndarray]:
        if not self.omega_injections or not self.in_window(cycle):
            return None
        position = {bus: g for g, bus in enumerate(network.generator_buses)}
        offsets = np.zeros(network.n_generators)
        for (bus, c), value in self.omega_injections.items():
            if c == cycle:
                offsets[position[bus]] = value
        return offsets

    def injection_matrix(self, network: NetworkModel) -> np.ndarray:
        """n_cycles x buses offsets"""
        table = np.zeros((self.n_cycles, network.n_buses))
        for (bus, c), value in self.injections.items():
            table[c - self.start_cycle, bus - 1] = value
        return table

    def attacked_measurements(self, benign_loads: np.ndarray, network: NetworkModel) -> np.ndarray:
        """Perceived loads per cycle of the window: benign + injection"""
        return np.asarray(benign_loads, dtype=float)[None, :] + self.injection_matrix(network)


@dataclass
class SynthesisResult:
    attack: Optional[AttackVector]
    trip_event: Optional[RelayEvent]
    trip_timeslot: Optional[int]
    lfc_cycles_to_goal: Optional[int]
    attack_start_timeslot: int = 0
    horizon_cycles: int = 0
    predicted_states: Optional[List[GridState]] = None
    solves: List[Dict[str, Any]] = field(default_factory=list)
    exhaustive: bool = True

    @property
    def feasible(self) -> bool:
        return self.attack is not None

    @property
    def timeslots_to_goal(self) -> Optional[int]:
        if self.trip_timeslot is None:
            return None
        return self.trip_timeslot - self.attack_start_timeslot

    @property
    def wall_time(self) -> float:
        return float(sum(s["wall_time"] for s in self.solves))


@dataclass
class ReplayReport:
    tripped: bool
    trip_event: Optional[RelayEvent]
    trip_timeslot: Optional[int]
    predicted_trip_timeslot: Optional[int]
    alarms: List[Dict[str, Any]]
    pre_trip_alarms: int
    max_discrepancy: Optional[float] = None
    verified: bool = False

    def as_dict(self) -> Dict[str, Any]:
        return {
            "tripped": self.tripped,
            "trip_kind": None if self.trip_event is None else self.trip_event.kind,
            "trip_bus": None if self.trip_event is None else self.trip_event.bus,
            "trip_timeslot": self.trip_timeslot,
            "predicted_trip_timeslot": self.predicted_trip_timeslot,
            "alarms": len(self.alarms),
            "pre_trip_alarms": self.pre_trip_alarms,
            "max_discrepancy": self.max_discrepancy,
            "verified": self.verified,
        }


@dataclass
class ResiliencyResult:
    k: int
    bound: str              # "exact" or "sampled"
    never_feasible: bool    # no accessible set of any size reaches the goal
    tested: Dict[int, int] = field(default_factory=dict)  # subset size -> subsets solved

    @property
    def label(self) -> str:
        return "N/A" if self.never_feasible else str(self.k)


@dataclass
class AttackMilp:
    """The model plus the variable indices needed to read a solution back"""
    model: MilpModel
    horizon_cycles: int
    start_timeslot: int
    x0: np.ndarray
    states: List[List[int]]                   # timeslot 1..T -> packed-state columns
    injections: List[Dict[int, int]]          # cycle -> {bus: column}
    omega_injections: List[Dict[int, int]]    # cycle -> {generator bus: column}
    goal_binaries: List[Tuple[int, int, str, int]] = field(default_factory=list)  # (tau, gen, kind, column)

    @property
    def n_binaries(self) -> int:
        return len(self.model.binaries)


def _check_detector(mode: str, detector: Detector) -> None:
    if mode == "ml_adm" and not isinstance(detector, AdmModel):
        raise ValueError("ml_adm mode needs a trained AdmModel")
    if mode == "rules_bdd" and not isinstance(detector, BddRule):
        raise ValueError("rules_bdd mode needs a BddRule")


def _goal_kinds(goal: str) -> Tuple[str, ...]:
    if goal not in GOALS:
        raise ValueError(f"unknown goal {goal!r}")
    return {"uf": ("UF",), "of": ("OF",), "either": ("UF", "OF")}[goal]


def _estimate_size(network: NetworkModel, horizon_cycles: int, lfc_period: int,
                   n_kinds: int, goal_timeslots: int, omega: bool, n_selectors: int) -> int:
    state = network.n_buses - 1 + 3 * network.n_generators
    per_cycle = (network.n_buses + network.n_generators + len(network.load_only_indices)
                 + 2 * network.n_generators + (network.n_generators if omega else 0))
    goal = goal_timeslots * (network.n_generators * n_kinds + 1)
    return horizon_cycles * lfc_period * state + horizon_cycles * (per_cycle + n_selectors) + goal


def build_attack_milp(network: NetworkModel, sim: SimConfig, initial: GridState,
                      benign_loads: np.ndarray, adversary: AdversaryModel, detector: Detector,
                      relay: Optional[RelayConfig], horizon_cycles: int, goal: str = "uf",
                      config: AttackConfig = AttackConfig(), bigm: BigMConfig = BigMConfig(),
                      goal_from_cycle: int = 0, feasibility_only: bool = False) -> AttackMilp:
    """
    Attack-synthesis MILP over `horizon_cycles` LFC cycles from the attack start

    Args:
        initial: plant state at the attack start timeslot (attack_start * lfc_period)
        benign_loads: true loads per bus, constant over the window
        relay: relay thresholds, defaults to the network's
        goal: "uf", "of" or "either"
        goal_from_cycle: relay goals are only checked from this window cycle on
        feasibility_only: zero objective with "some relay trips" instead of earliest trip

    Raises:
        ModelTooLarge: the variable count exceeds config.max_variables
    """
    if horizon_cycles < 1 or horizon_cycles > adversary.max_duration:
        raise ValueError(f"horizon must be within 1..{adversary.max_duration} cycles")
    if not 0 <= goal_from_cycle < horizon_cycles:
        raise ValueError("goal_from_cycle must lie inside the horizon")
    _check_detector(adversary.detector_mode, detector)
    kinds = _goal_kinds(goal)
    relay = relay or network.relay
    p = sim.lfc_period
    dt = sim.dt
    t0 = adversary.attack_start * p
    if initial.t != t0:
        raise ValueError(f"initial state is at t={initial.t}, attack starts at t={t0}")
    benign = np.asarray(benign_loads, dtype=float)
    if benign.shape != (network.n_buses,):
        raise ValueError("benign loads must be given per bus")

    adm = detector if adversary.detector_mode == "ml_adm" else None
    n_selectors = 0
    if adm is not None:
        n_selectors = sum(len(h) for h in adm.per_bus.values() if len(h) > 1)
    T = horizon_cycles * p
    first_goal = goal_from_cycle * p + 1
    estimate = _estimate_size(network, horizon_cycles, p, len(kinds), T - first_goal + 1,
                              config.omega_injection, n_selectors)
    if estimate > config.max_variables:
        raise ModelTooLarge(f"about {estimate} variables for {horizon_cycles} cycles "
                            f"(limit {config.max_variables})")

    system = build_step_system(network, dt, sim.governor_form)
    x0 = pack_state(initial, system)
    model = MilpModel(name=f"attack_h{horizon_cycles}")
    power_bound = 10.0 * (float(benign.sum()) + 1.0)
    droop = network.generator_array("droop")
    gen_buses = network.generator_buses
    gen_pos = {bus - 1: g for g, bus in enumerate(gen_buses)}
    slack_gen = network.slack_generator
    omega_lo, omega_hi = config.omega_bounds

    def state_bounds(col: int) -> Tuple[float, float]:
        if col < system.n_theta:
            return -ANGLE_BOUND, ANGLE_BOUND
        if col < system.n_theta + system.n_gen:
            return omega_lo, omega_hi
        return -power_bound, power_bound

    states: List[List[int]] = []
    for tau in range(1, T + 1):
        cols = []
        for c in range(system.size):
            lo, hi = state_bounds(c)
            cols.append(model.add_variable(f"x_{tau}_{c}", lo, hi))
        states.append(cols)

    def state_col(tau: int, c: int) -> Optional[int]:
        return None if tau == 0 else states[tau - 1][c]

    def state_term(tau: int, c: int, coef: float, row: Dict[int, float]) -> float:
        """Adds coef * x_tau[c] to row; returns the constant part when tau == 0"""
        if tau == 0:
            return coef * x0[c]
        idx = states[tau - 1][c]
        row[idx] = row.get(idx, 0.0) + coef
        return 0.0

    attackable = set(adversary.attackable_buses(network))
    injections: List[Dict[int, int]] = []
    omega_injections: List[Dict[int, int]] = []
    set_points: List[List[int]] = []
    lap = network.laplacian()
    load_only = list(network.load_only_indices)
    accessible = set(adversary.accessible_buses(network))

    for j in range(horizon_cycles):
        tau_j = j * p
        inj = {}
        for bus in network.bus_ids:
            if bus in attackable:
                lo = max(-config.injection_bound, -benign[bus - 1])
                inj[bus] = model.add_variable(f"inj_{bus}_{j}", lo, config.injection_bound)
        injections.append(inj)
        w = {}
        if config.omega_injection:
            for bus in gen_buses:
                if bus in accessible:
                    w[bus] = model.add_variable(f"w_{bus}_{j}", -config.omega_injection_bound,
                                                config.omega_injection_bound)
        omega_injections.append(w)

        # estimated generator angles: true angle plus the integrated omega offsets
        delta_c = {}
        for g, bus in enumerate(gen_buses):
            if g == slack_gen:
                continue
            col = model.add_variable(f"dc_{bus}_{j}", -ANGLE_BOUND, ANGLE_BOUND)
            row = {col: 1.0}
            const = state_term(tau_j, system.theta_cols[bus - 1], -1.0, row)
            slack_bus = gen_buses[slack_gen]
            for tau in range(1, tau_j + 1):
                k = tau // p
                if bus in omega_injections[k]:
                    row[omega_injections[k][bus]] = row.get(omega_injections[k][bus], 0.0) - dt
                if slack_bus in omega_injections[k]:
                    idx = omega_injections[k][slack_bus]
                    row[idx] = row.get(idx, 0.0) + dt
            model.add_constraint(row, "==", -const, f"dc_{bus}_{j}")
            delta_c[bus - 1] = col
        theta_n = {i: model.add_variable(f"thn_{i + 1}_{j}", -ANGLE_BOUND, ANGLE_BOUND) for i in load_only}

        def angle_col(i: int) -> Optional[int]:
            if i in theta_n:
                return theta_n[i]
            return delta_c.get(i)  # None for the slack

        # DC flow on perceived loads
        for i in load_only:
            row = {}
            for k in range(network.n_buses):
                col = angle_col(k)
                if col is not None and lap[i, k] != 0.0:
                    row[col] = row.get(col, 0.0) - lap[i, k]
            if (i + 1) in inj:
                row[inj[i + 1]] = -1.0
            model.add_constraint(row, "==", benign[i], f"flow_{i + 1}_{j}")
        p_r_cols = []
        for g, bus in enumerate(gen_buses):
            i = bus - 1
            pgc = model.add_variable(f"pgc_{bus}_{j}", -power_bound, power_bound)
            row = {pgc: 1.0}
            for k in range(network.n_buses):
                col = angle_col(k)
                if col is not None and lap[i, k] != 0.0:
                    row[col] = row.get(col, 0.0) - lap[i, k]
            if bus in inj:
                row[inj[bus]] = -1.0
            model.add_constraint(row, "==", benign[i], f"pgc_{bus}_{j}")
            scale = 1.0 if sim.governor_form == "standard" else droop[g]
            p_r = model.add_variable(f"pr_{bus}_{j}", -power_bound * max(scale, 1.0),
                                     power_bound * max(scale, 1.0))
            model.add_constraint({p_r: 1.0, pgc: -scale}, "==", 0.0, f"pr_{bus}_{j}")
            p_r_cols.append(p_r)
        set_points.append(p_r_cols)

    # plant steps with true loads
    constant = system.K @ benign + system.k0
    for tau in range(1, T + 1):
        j = (tau - 1) // p
        for r in range(system.size):
            row: Dict[int, float] = {}
            rhs = constant[r]
            for c in np.flatnonzero(system.A[r]):
                row[states[tau - 1][c]] = row.get(states[tau - 1][c], 0.0) + system.A[r, c]
            for c in np.flatnonzero(system.E[r]):
                rhs -= state_term(tau - 1, c, -system.E[r, c], row)
            for g in np.flatnonzero(system.F[r]):
                idx = set_points[j][g]
                row[idx] = row.get(idx, 0.0) - system.F[r, g]
            model.add_constraint(row, "==", rhs, f"step_{tau}_{r}")

    if adversary.detector_mode == "rules_bdd":
        _add_bdd_rows(model, injections, detector, config)
    elif adm is not None:
        _add_adm_rows(model, injections, adm, benign, network, attackable, config, bigm)

    goal_binaries = _add_goal_rows(model, states, system, network, relay, kinds, first_goal, T,
                                   config, bigm, feasibility_only)
    logger.debug("attack MILP h=%d: %d variables, %d rows, %d binaries", horizon_cycles,
                 model.n_variables, len(model.constraints), len(model.binaries))
    if model.n_variables > config.max_variables:
        raise ModelTooLarge(f"{model.n_variables} variables (limit {config.max_variables})")
    return AttackMilp(model, horizon_cycles, t0, x0, states, injections, omega_injections, goal_binaries)


def _add_bdd_rows(model: MilpModel, injections: List[Dict[int, int]], rule: BddRule,
                  config: AttackConfig) -> None:
    """|inj_j - inj_(j-1)| <= max_deviation - margin; the offset before the window is zero"""
    limit = rule.max_deviation - config.bdd_margin
    for j, inj in enumerate(injections):
        for bus, col in inj.items():
            row = {col: 1.0}
            if j > 0:
                row[injections[j - 1][bus]] = -1.0
            model.add_constraint(row, "<=", limit, f"bdd_up_{bus}_{j}")
            model.add_constraint({k: -v for k, v in row.items()}, "<=", limit, f"bdd_dn_{bus}_{j}")


def _add_adm_rows(model: MilpModel, injections: List[Dict[int, int]], adm: AdmModel,
                  benign: np.ndarray, network: NetworkModel, attackable: set,
                  config: AttackConfig, bigm: BigMConfig) -> None:
    """Every window of perceived loads lies inside some hull of its bus"""
    lookback = adm.lookback
    for bus, hulls in sorted(adm.per_bus.items()):
        base = benign[bus - 1]
        if bus not in attackable:
            if not is_benign(adm, bus, np.full(lookback + 1, base)):
                logger.warning("bus %d: benign load %.6g is flagged by its own detector", bus, base)
                model.add_constraint({}, "<=", -1.0, f"adm_benign_{bus}")
            continue
        for j in range(len(injections)):
            # window entry k is cycle j - lookback + k
            cols = [injections[j - lookback + k][bus] if j - lookback + k >= 0 else None
                    for k in range(lookback + 1)]
            selectors = []
            if len(hulls) > 1:
                selectors = [model.add_binary(f"sel_{bus}_{j}_{h}") for h in range(len(hulls))]
                model.add_constraint({s: 1.0 for s in selectors}, "==", 1.0, f"onehot_{bus}_{j}")
            for h, hull in enumerate(hulls):
                for r, plane in enumerate(hull.hyperplanes):
                    alpha, offset = plane[:-1], plane[-1]
                    row = {}
                    for k, col in enumerate(cols):
                        if col is not None and alpha[k] != 0.0:
                            row[col] = row.get(col, 0.0) + alpha[k]
                    rhs = -config.hull_margin - offset - float(alpha.sum()) * base
                    name = f"hull_{bus}_{j}_{h}_{r}"
                    if selectors:
                        encode_indicator(model, selectors[h], 1, row, rhs, bigm, name=name)
                    else:
                        model.add_constraint(row, "<=", rhs, name)


def _add_goal_rows(model: MilpModel, states: List[List[int]], system, network: NetworkModel,
                   relay: RelayConfig, kinds: Tuple[str, ...], first_goal: int, T: int,
                   config: AttackConfig, bigm: BigMConfig,
                   feasibility_only: bool) -> List[Tuple[int, int, str, int]]:
    uf = relay.uf_pu(network.base_frequency) - config.trip_margin
    of = relay.of_pu(network.base_frequency) + config.trip_margin
    goal_binaries = []
    for tau in range(first_goal, T + 1):
        for g in range(network.n_generators):
            omega = states[tau - 1][system.omega_col(g)]
            for kind in kinds:
                f = model.add_binary(f"trip_{kind}_{g}_{tau}")
                if kind == "UF":
                    encode_indicator(model, f, 1, {omega: 1.0}, uf, bigm, name=f"uf_{g}_{tau}")
                else:
                    encode_indicator(model, f, 1, {omega: -1.0}, -of, bigm, name=f"of_{g}_{tau}")
                goal_binaries.append((tau, g, kind, f))

    if feasibility_only:
        model.add_constraint({f: 1.0 for *_, f in goal_binaries}, ">=", 1.0, "some_trip")
        model.set_objective({})
        return goal_binaries

    # n_tau = 1 until the first trip; the f's force it integral
    pending = {}
    prev = None
    for tau in range(first_goal, T + 1):
        n = model.add_variable(f"pending_{tau}", 0.0, 0.0 if tau == T else 1.0)
        row = {n: 1.0}
        if prev is not None:
            row[prev] = -1.0
        model.add_constraint(row, "<=", 0.0 if prev is not None else 1.0, f"chain_{tau}")
        tripped = {f: 1.0 for t, _, _, f in goal_binaries if t == tau}
        tripped[n] = 1.0
        if prev is not None:
            tripped[prev] = -1.0
        model.add_constraint(tripped, "==", 0.0 if prev is not None else 1.0, f"first_{tau}")
        pending[tau] = n
        prev = n
    model.set_objective({n: 1.0 for n in pending.values()})
    return goal_binaries


def predicted_states(milp: AttackMilp, solution: MilpSolution, network: NetworkModel,
                     sim: SimConfig, benign_loads: np.ndarray) -> List[GridState]:
    """Plant states from the solution, the attack-start state included"""
    system = build_step_system(network, sim.dt, sim.governor_form)
    loads = np.asarray(benign_loads, dtype=float)
    result = [unpack_state(milp.x0, system, milp.start_timeslot, loads)]
    for tau, cols in enumerate(milp.states, start=1):
        result.append(unpack_state(solution.values[cols], system, milp.start_timeslot + tau, loads))
    return result


def _predicted_trip(states: List[GridState], network: NetworkModel,
                    relay: RelayConfig, goal: str = "either") -> Optional[RelayEvent]:
    """First crossing of the goal's relay kinds; the other kind is ignored"""
    kinds = _goal_kinds(goal)
    uf, of = relay.uf_pu(network.base_frequency), relay.of_pu(network.base_frequency)
    for state in states:
        for g, bus in enumerate(network.generator_buses):
            if "UF" in kinds and state.omega[g] <= uf:
                return RelayEvent(bus, "UF", state.t, float(state.omega[g] * network.base_frequency))
            if "OF" in kinds and state.omega[g] >= of:
                return RelayEvent(bus, "OF", state.t, float(state.omega[g] * network.base_frequency))
    return None


def extract_attack(milp: AttackMilp, solution: MilpSolution, adversary: AdversaryModel,
                   goal: str) -> AttackVector:
    injections = {}
    omega = {}
    for j, inj in enumerate(milp.injections):
        for bus, col in inj.items():
            injections[(bus, adversary.attack_start + j)] = float(solution.values[col])
    for j, w in enumerate(milp.omega_injections):
        for bus, col in w.items():
            omega[(bus, adversary.attack_start + j)] = float(solution.values[col])
    return AttackVector(adversary.attack_start, milp.horizon_cycles, injections, omega,
                        adversary.detector_mode, goal)


def state_at_attack_start(network: NetworkModel, sim: SimConfig, initial: GridState,
                           benign: np.ndarray, t0: int) -> GridState:
    if initial.t > t0:
        raise ValueError(f"initial state at t={initial.t} is past the attack start t={t0}")
    if initial.t == t0:
        return initial
    pre = run_horizon(network, initial, replace(sim, horizon=t0 - initial.t), benign, LfcPolicy())
    return pre.states[-1]


def find_min_trip_time(network: NetworkModel, sim: SimConfig, initial: GridState,
                       benign_loads: np.ndarray, adversary: AdversaryModel, detector: Detector,
                       relay: Optional[RelayConfig] = None, goal: str = "uf",
                       config: AttackConfig = AttackConfig(), limits: SolveLimits = SolveLimits(),
                       bigm: BigMConfig = BigMConfig()) -> SynthesisResult:
    """
    Stealthy attack with the earliest relay trip, by incremental horizon extension

    Horizon h only looks for trips inside its last LFC cycle, since every
    earlier timeslot was already ruled out at a shorter horizon.

    Args:
        initial: plant state at or before the attack start; benign loads are
            simulated up to the start

    Returns:
        SynthesisResult; attack is None when no horizon up to max_duration works
    """
    relay = relay or network.relay
    benign = np.asarray(benign_loads, dtype=float)
    p = sim.lfc_period
    t0 = adversary.attack_start * p
    start_state = state_at_attack_start(network, sim, initial, benign, t0)
    solves = []
    exhaustive = True
    for h in range(1, adversary.max_duration + 1):
        milp = build_attack_milp(network, sim, start_state, benign, adversary, detector, relay, h,
                                 goal, config, bigm, goal_from_cycle=h - 1)
        solution = solve_milp(milp.model, limits)
        solves.append({"horizon": h, "status": solution.status.value, "nodes": solution.nodes,
                       "wall_time": solution.wall_time, "variables": milp.model.n_variables,
                       "binaries": milp.n_binaries})
        logger.info("horizon %d cycles: %s after %d nodes", h, solution.status.value, solution.nodes)
        if solution.status is SolveStatus.UNBOUNDED:
            raise SolverError(f"attack MILP at horizon {h} is unbounded")
        if solution.status is SolveStatus.TIME_LIMIT:
            exhaustive = False
            if not solution.has_solution:
                logger.warning("horizon %d: limit reached without an attack, extending", h)
                continue
        elif solution.status is SolveStatus.INFEASIBLE:
            continue

        states = predicted_states(milp, solution, network, sim, benign)
        attack = extract_attack(milp, solution, adversary, goal)
        event = _predicted_trip(states, network, relay, goal)
        if event is None:
            # goal rows guarantee a crossing; only reachable through solver tolerance
            raise SolverError(f"horizon {h}: solution without a relay crossing")
        attack.predicted_trip_timeslot = event.timeslot
        cycles = math.ceil((event.timeslot - t0) / p)
        logger.info("%s trip at bus %d, t=%d (%d LFC cycles)", event.kind, event.bus, event.timeslot, cycles)
        return SynthesisResult(attack, event, event.timeslot, cycles, t0, h, states, solves, exhaustive)

    logger.info("no stealthy attack within %d cycles", adversary.max_duration)
    return SynthesisResult(None, None, None, None, t0, adversary.max_duration, None, solves, exhaustive)


def truncate_attack(attack: AttackVector, n_cycles: int) -> AttackVector:
    """The first n_cycles cycles of the attack; injections stop afterwards"""
    if n_cycles < 1:
        raise ValueError("keep at least one cycle")
    n_cycles = min(n_cycles, attack.n_cycles)
    end = attack.start_cycle + n_cycles
    return AttackVector(
        attack.start_cycle,
        n_cycles,
        {key: v for key, v in attack.injections.items() if key[1] < end},
        {key: v for key, v in attack.omega_injections.items() if key[1] < end},
        attack.detector_mode,
        attack.goal,
        None,
    )


def scan_alarms(records: Sequence[Any], network: NetworkModel, detector: Detector) -> List[Dict[str, Any]]:
    """
    Detector verdicts over the perceived loads of a run, one entry per flag

    Returns:
        Rows {cycle, bus, detector, flagged}; flagged is always 1
    """
    alarms = []
    loads = [r.perception.perceived_loads for r in records]
    cycles = [r.cycle for r in records]
    if isinstance(detector, BddRule):
        measured = network.measured_buses
        for k in range(1, len(records)):
            for bus in measured:
                if not bdd_check(detector, loads[k - 1][bus - 1], loads[k][bus - 1]):
                    alarms.append({"cycle": cycles[k], "bus": bus, "detector": "bdd", "flagged": 1})
    elif isinstance(detector, AdmModel):
        l = detector.lookback
        for k in range(l, len(records)):
            history = np.array(loads[k - l:k + 1])
            for bus in check_perception(detector, history, network.bus_ids):
                alarms.append({"cycle": cycles[k], "bus": bus, "detector": "adm", "flagged": 1})
    return alarms


def replay_attack(attack: AttackVector, network: NetworkModel, sim: SimConfig, initial: GridState,
                  benign_loads: np.ndarray, detector: Detector, relay: Optional[RelayConfig] = None,
                  predicted: Optional[SynthesisResult] = None, verify: bool = True,
                  policy: Optional[LfcPolicy] = None, horizon: Optional[int] = None,
                  integrator: str = "backward_euler") -> Tuple[Trajectory, ReplayReport]:
    """
    Re-simulate an attack through the closed loop and check it

    Args:
        predicted: the synthesis result to compare states against
        verify: raise on disagreement; off when replaying against a detector
            the attack was not synthesized for
        horizon: timeslots to simulate, at least past the attack window

    Raises:
        VerificationMismatch: no trip, trip more than 2 timeslots from the
            prediction, detector alarms before the trip, or states off the MILP
    """
    relay = relay or network.relay
    p = sim.lfc_period
    needed = (attack.end_cycle + 1) * p - initial.t
    if horizon is None:
        horizon = max(sim.horizon, needed)
    run = replace(sim, horizon=horizon)
    trajectory = run_horizon(network, initial, run, np.asarray(benign_loads, dtype=float),
                             policy or LfcPolicy(), attack, relay, integrator)
    event = first_trip(trajectory.relay_events, _goal_kinds(attack.goal))
    alarms = scan_alarms(trajectory.dispatch, network, detector)
    trip_t = None if event is None else event.timeslot
    pre_trip = [a for a in alarms if trip_t is None or a["cycle"] * p < trip_t]
    predicted_t = attack.predicted_trip_timeslot
    if predicted is not None and predicted.trip_timeslot is not None:
        predicted_t = predicted.trip_timeslot

    discrepancy = None
    if predicted is not None and predicted.predicted_states:
        by_t = {s.t: s for s in trajectory.states}
        gaps = []
        for state in predicted.predicted_states:
            other = by_t.get(state.t)
            if other is None:
                continue
            gaps.append(max(np.max(np.abs(state.delta - other.delta)),
                            np.max(np.abs(state.omega - other.omega)),
                            np.max(np.abs(state.mech_power - other.mech_power)),
                            np.max(np.abs(state.gen_power - other.gen_power))))
        discrepancy = float(max(gaps)) if gaps else None

    report = ReplayReport(event is not None, event, trip_t, predicted_t, alarms, len(pre_trip), discrepancy)
    problems = []
    if event is None:
        problems.append("no relay trip")
    elif predicted_t is not None and abs(trip_t - predicted_t) > TRIP_TOLERANCE:
        problems.append(f"trip at t={trip_t}, predicted t={predicted_t}")
    if pre_trip:
        problems.append(f"{len(pre_trip)} detector alarms before the trip")
    if discrepancy is not None and discrepancy > STATE_TOLERANCE:
        problems.append(f"states differ from the MILP by {discrepancy:.3g}")
    report.verified = not problems
    logger.info("replay: trip=%s alarms=%d verified=%s", trip_t, len(alarms), report.verified)
    if verify and problems:
        raise VerificationMismatch("; ".join(problems), report)
    return trajectory, report


def _subsets(buses: List[int], size: int, config: AttackConfig,
             rng: np.random.Generator) -> Tuple[List[Tuple[int, ...]], str]:
    if len(buses) <= config.resiliency_exact_limit:
        return list(itertools.combinations(buses, size)), "exact"
    total = math.comb(len(buses), size)
    if total <= config.resiliency_samples:
        return list(itertools.combinations(buses, size)), "exact"
    seen = set()
    picks = []
    while len(picks) < config.resiliency_samples:
        pick = tuple(sorted(rng.choice(buses, size=size, replace=False).tolist()))
        if pick not in seen:
            seen.add(pick)
            picks.append(pick)
    return picks, "sampled"


def attack_feasible(network: NetworkModel, sim: SimConfig, start_state: GridState,
                    benign_loads: np.ndarray, adversary: AdversaryModel, detector: Detector,
                    relay: RelayConfig, horizon_cycles: int, goal: str,
                    config: AttackConfig, limits: SolveLimits, bigm: BigMConfig) -> bool:
    """Any stealthy attack tripping a relay within the horizon"""
    milp = build_attack_milp(network, sim, start_state, benign_loads, adversary, detector, relay,
                             horizon_cycles, goal, config, bigm, feasibility_only=True)
    solution = solve_milp(milp.model, limits)
    if solution.status is SolveStatus.TIME_LIMIT and not solution.has_solution:
        logger.warning("feasibility solve hit its limit; counted as infeasible")
    return solution.has_solution


def k_resiliency(network: NetworkModel, sim: SimConfig, initial: GridState,
                 benign_loads: np.ndarray, adversary: AdversaryModel, detector: Detector,
                 horizon_cycles: int, relay: Optional[RelayConfig] = None, goal: str = "uf",
                 config: AttackConfig = AttackConfig(), limits: SolveLimits = SolveLimits(),
                 bigm: BigMConfig = BigMConfig(), seed: int = 0,
                 allow_sampling: bool = True) -> ResiliencyResult:
    """
    Largest k such that no attacker with k measurements reaches the goal within the horizon

    Subset sizes are searched from all measured buses downwards; the search
    stops at the first size where every tested subset is infeasible. The
    adversary's accessibility is ignored, every other attribute is kept.

    Raises:
        CombinatorialBudgetExceeded: sampling would be needed and allow_sampling is False
    """
    relay = relay or network.relay
    benign = np.asarray(benign_loads, dtype=float)
    measured = [bus for bus in network.measured_buses]
    start_state = state_at_attack_start(network, sim, initial, benign, adversary.attack_start * sim.lfc_period)
    rng = np.random.default_rng(seed)
    bound = "exact"
    tested = {}
    for size in range(len(measured), 0, -1):
        subsets, kind = _subsets(measured, size, config, rng)
        if kind == "sampled":
            if not allow_sampling:
                raise CombinatorialBudgetExceeded(
                    f"{math.comb(len(measured), size)} subsets of size {size}")
            bound = "sampled"
        tested[size] = 0
        feasible = False
        for subset in subsets:
            tested[size] += 1
            candidate = replace(adversary, accessibility=AdversaryModel.from_buses(network, subset).accessibility)
            if attack_feasible(network, sim, start_state, benign, candidate, detector, relay,
                               horizon_cycles, goal, config, limits, bigm):
                feasible = True
                break
        logger.info("k-resiliency: size %d %s", size, "feasible" if feasible else "infeasible")
        if not feasible:
            return ResiliencyResult(size, bound, size == len(measured), tested)
    return ResiliencyResult(0, bound, False, tested)


def attack_to_dict(attack: AttackVector) -> Dict[str, Any]:
    return {
        "start_cycle": attack.start_cycle,
        "n_cycles": attack.n_cycles,
        "injections": [{"bus": bus, "cycle": cycle, "delta_pu": value}
                       for (bus, cycle), value in sorted(attack.injections.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
        "omega_injections": [{"bus": bus, "cycle": cycle, "delta_pu": value}
                             for (bus, cycle), value in sorted(attack.omega_injections.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
        "detector_mode": attack.detector_mode,
        "goal": attack.goal,
        "predicted_trip_timeslot": attack.predicted_trip_timeslot,
    }


def attack_from_dict(data: Dict[str, Any]) -> AttackVector:
    try:
        injections = {(int(e["bus"]), int(e["cycle"])): float(e["delta_pu"]) for e in data["injections"]}
        omega = {(int(e["bus"]), int(e["cycle"])): float(e["delta_pu"])
                 for e in data.get("omega_injections", [])}
        start = int(data["start_cycle"])
        cycles = [c for _, c in list(injections) + list(omega)]
        n_cycles = int(data.get("n_cycles", (max(cycles) - start + 1) if cycles else 1))
        predicted = data.get("predicted_trip_timeslot")
        return AttackVector(start, n_cycles, injections, omega, data.get("detector_mode", "none"),
                            data.get("goal", "uf"), None if predicted is None else int(predicted))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedCase(f"bad attack vector document: {e}") from e


def save_attack(attack: AttackVector, path: str) -> bool:
    """Attack vector file: {start_cycle, injections: [{bus, cycle, delta_pu}], detector_mode, goal, predicted_trip_timeslot}"""
    return save_json_file(path, attack_to_dict(attack))


def load_attack(path: str) -> AttackVector:
    data = load_json_file(path)
    if not isinstance(data, dict):
        raise MalformedCase(f"{path}: not an attack vector file")
    return attack_from_dict(data)
