#!/usr/bin/env python3

"""
Discretized primary frequency response and the closed LFC loop.

Per generator g at bus b, with a = dt / (2 H) and c = dt / T, one implicit
(Backward-Euler) step from t to t+1 solves simultaneously

    delta_b - dt * (w_g - w_slack)            = delta_b(t)                  angle
    w_g (1 + a K_D) - a P_M + a P_G            = w_g(t) + a K_D w_R          swing
    P_M (1 + c) + (c / R) w_g                  = P_M(t) + (c / R)(P_R + w_R) governor
    P_G[b] - (L @ delta)[b]                    = P_L[b](t+1)                 DC flow

(the governor row uses c * P_R + (c / R) w_R with governor_form "standard").
The slack angle is pinned to zero, so the unknowns are the non-slack angles
and w, P_M, P_G per generator. The rows are kept as matrices

    A x(t+1) = E x(t) + F P_R + K P_L(t+1) + k0

so the attack MILP can reuse exactly the same equations.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import HorizonNotCovered, SingularStep
from grid_model.grid_model import DcFlowSolver, NetworkModel, RelayConfig, SINGULAR_TOL
from lfc.lfc import GOVERNOR_FORMS, DispatchRecord, LfcController, LfcPolicy
from save_load import save_csv_file
from utils.log import get_logger

logger = get_logger("dynamics")

INTEGRATORS = ("backward_euler", "reference")
TRAJECTORY_COLUMNS = ["t", "bus", "delta_rad", "omega_pu", "freq_hz", "p_m", "p_g", "p_l", "p_r"]


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 60.0
    horizon: int = 3000
    lfc_period: int = 60
    governor_form: str = "paper_eq3"
    reference_substeps: int = 100

    def __post_init__(self):
        if self.dt <= 0 or self.lfc_period < 1 or self.horizon < 1:
            raise ValueError("dt must be positive, lfc_period and horizon at least 1")
        if self.governor_form not in GOVERNOR_FORMS:
            raise ValueError(f"unknown governor form {self.governor_form!r}")

    @classmethod
    def from_settings(cls, section: Dict[str, Any]) -> "SimConfig":
        return cls(
            dt=float(section.get("dt", cls.dt)),
            horizon=int(section.get("horizon", cls.horizon)),
            lfc_period=int(section.get("lfc_period", cls.lfc_period)),
            governor_form=section.get("governor_form", cls.governor_form),
            reference_substeps=int(section.get("reference_substeps", cls.reference_substeps)),
        )


@dataclass
class GridState:
    """
    Plant state at one timeslot.

    `delta` holds the slack-referenced angle of every bus; the generator rotor
    angles are its entries at the generator buses. Generator quantities are in
    generator order.
    """
    t: int
    delta: np.ndarray
    omega: np.ndarray
    mech_power: np.ndarray
    gen_power: np.ndarray
    load: np.ndarray

    def rotor_angles(self, network: NetworkModel) -> np.ndarray:
        return self.delta[network.generator_indices]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.delta, self.omega, self.mech_power, self.gen_power, self.load))


@dataclass(frozen=True)
class RelayEvent:
    bus: int
    kind: str        # "UF" or "OF"
    timeslot: int
    frequency: float  # Hz


@dataclass
class Trajectory:
    states: List[GridState]
    dispatch: List[DispatchRecord]
    generator_buses: List[int]
    base_frequency: float
    lfc_period: int
    relay_events: List[RelayEvent] = field(default_factory=list)
    alarms: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    @property
    def omega(self) -> np.ndarray:
        """(timeslots + 1) x generators"""
        return np.array([s.omega for s in self.states])

    @property
    def frequency_hz(self) -> np.ndarray:
        return self.omega * self.base_frequency

    @property
    def dispatch_history(self) -> np.ndarray:
        """cycles x generators setpoints"""
        return np.array([r.p_r for r in self.dispatch])

    def setpoint_at(self, t: int) -> np.ndarray:
        """Setpoints in force for the step t -> t+1"""
        cycle = min(t // self.lfc_period, len(self.dispatch) - 1)
        return self.dispatch[cycle].p_r


@dataclass
class StepSystem:
    """Matrices of one implicit step plus the state-vector layout"""
    A: np.ndarray
    E: np.ndarray
    F: np.ndarray
    K: np.ndarray
    k0: np.ndarray
    theta_cols: Dict[int, int]  # bus index -> column, slack excluded
    n_theta: int
    n_gen: int

    @property
    def size(self) -> int:
        return self.n_theta + 3 * self.n_gen

    def omega_col(self, g: int) -> int:
        return self.n_theta + g

    def mech_col(self, g: int) -> int:
        return self.n_theta + self.n_gen + g

    def gen_col(self, g: int) -> int:
        return self.n_theta + 2 * self.n_gen + g

    def rhs(self, x: np.ndarray, p_r: np.ndarray, loads: np.ndarray) -> np.ndarray:
        return self.E @ x + self.F @ p_r + self.K @ loads + self.k0


def build_step_system(network: NetworkModel, dt: float,
                      governor_form: str = "paper_eq3") -> StepSystem:
    """Assemble the Backward-Euler step rows for the network"""
    n = network.n_buses
    n_gen = network.n_generators
    slack = network.slack_index
    theta_cols = {}
    for i in range(n):
        if i != slack:
            theta_cols[i] = len(theta_cols)
    n_theta = len(theta_cols)
    size = n_theta + 3 * n_gen
    A = np.zeros((size, size))
    E = np.zeros((size, size))
    F = np.zeros((size, n_gen))
    K = np.zeros((size, n))
    k0 = np.zeros(size)
    omega_r = network.nominal_omega
    lap = network.laplacian()
    slack_gen = network.slack_generator

    def om(g):
        return n_theta + g

    def pm(g):
        return n_theta + n_gen + g

    def pg(g):
        return n_theta + 2 * n_gen + g

    row = 0
    for g, bus in enumerate(network.generator_buses):
        if g == slack_gen:
            continue
        col = theta_cols[bus - 1]
        A[row, col] = 1.0
        A[row, om(g)] -= dt
        A[row, om(slack_gen)] += dt
        E[row, col] = 1.0
        row += 1

    for g, bus in enumerate(network.generator_buses):
        params = network.generators[bus]
        a = dt / (2.0 * params.inertia)
        A[row, om(g)] = 1.0 + a * params.damping
        A[row, pm(g)] = -a
        A[row, pg(g)] = a
        E[row, om(g)] = 1.0
        k0[row] = a * params.damping * omega_r
        row += 1

    for g, bus in enumerate(network.generator_buses):
        params = network.generators[bus]
        E[row, pm(g)] = 1.0
        if params.has_governor:
            c = dt / params.governor_time_constant
            A[row, pm(g)] = 1.0 + c
            A[row, om(g)] = c / params.droop
            if governor_form == "standard":
                F[row, g] = c
            else:
                F[row, g] = c / params.droop
            k0[row] = c / params.droop * omega_r
        else:
            A[row, pm(g)] = 1.0
        row += 1

    gen_pos = {bus - 1: g for g, bus in enumerate(network.generator_buses)}
    for i in range(n):
        if i in gen_pos:
            A[row, pg(gen_pos[i])] = 1.0
        for j, col in theta_cols.items():
            A[row, col] -= lap[i, j]
        K[row, i] = 1.0
        row += 1

    return StepSystem(A, E, F, K, k0, theta_cols, n_theta, n_gen)


def pack_state(state: GridState, system: StepSystem) -> np.ndarray:
    x = np.zeros(system.size)
    for i, col in system.theta_cols.items():
        x[col] = state.delta[i]
    g = system.n_gen
    x[system.n_theta:system.n_theta + g] = state.omega
    x[system.n_theta + g:system.n_theta + 2 * g] = state.mech_power
    x[system.n_theta + 2 * g:] = state.gen_power
    return x


def unpack_state(x: np.ndarray, system: StepSystem, t: int, loads: np.ndarray) -> GridState:
    n = len(loads)
    delta = np.zeros(n)
    for i, col in system.theta_cols.items():
        delta[i] = x[col]
    g = system.n_gen
    return GridState(
        t=t,
        delta=delta,
        omega=x[system.n_theta:system.n_theta + g].copy(),
        mech_power=x[system.n_theta + g:system.n_theta + 2 * g].copy(),
        gen_power=x[system.n_theta + 2 * g:].copy(),
        load=np.asarray(loads, dtype=float).copy(),
    )


class BackwardEulerStepper:
    """Implicit stepper; the step matrix is constant so it is factored once"""

    def __init__(self, network: NetworkModel, dt: float, governor_form: str = "paper_eq3"):
        self.network = network
        self.system = build_step_system(network, dt, governor_form)
        sv = np.linalg.svd(self.system.A, compute_uv=False)
        if sv[-1] <= SINGULAR_TOL * max(sv[0], 1.0):
            raise SingularStep(f"{network.name}: implicit step matrix is singular "
                               "(islanded bus or zero-susceptance network)")
        self._lu = lu_factor(self.system.A)

    def step(self, state: GridState, p_r: np.ndarray, loads: np.ndarray) -> GridState:
        x = pack_state(state, self.system)
        x_next = lu_solve(self._lu, self.system.rhs(x, p_r, loads))
        return unpack_state(x_next, self.system, state.t + 1, loads)


class ReferenceStepper:
    """
    Fine-step explicit Euler on the continuous swing/governor equations with
    the DC flow solved algebraically at every substep. Used to cross-check the
    implicit stepper.
    """

    def __init__(self, network: NetworkModel, dt: float, governor_form: str = "paper_eq3",
                 substeps: int = 100):
        self.network = network
        self.h = dt / substeps
        self.substeps = substeps
        self.governor_form = governor_form
        self.flow = DcFlowSolver(network)
        self.inertia = network.generator_array("inertia")
        self.droop = network.generator_array("droop")
        self.tau = network.generator_array("governor_time_constant")
        self.damping = network.generator_array("damping")
        self.governed = np.array([network.generators[b].has_governor
                                  for b in network.generator_buses])

    def step(self, state: GridState, p_r: np.ndarray, loads: np.ndarray) -> GridState:
        net = self.network
        slack = net.slack_generator
        omega_r = net.nominal_omega
        loads = np.asarray(loads, dtype=float)
        theta_g = state.delta[net.generator_indices].astype(float).copy()
        omega = state.omega.astype(float).copy()
        mech = state.mech_power.astype(float).copy()
        for _ in range(self.substeps):
            _, gen = self.flow.solve(theta_g, loads)
            d_theta = omega - omega[slack]
            d_omega = (mech - gen - self.damping * (omega - omega_r)) / (2.0 * self.inertia)
            if self.governor_form == "standard":
                target = p_r - (omega - omega_r) / self.droop
            else:
                target = (p_r - (omega - omega_r)) / self.droop
            d_mech = np.where(self.governed, (target - mech) / self.tau, 0.0)
            theta_g = theta_g + self.h * d_theta
            theta_g[slack] = 0.0
            omega = omega + self.h * d_omega
            mech = mech + self.h * d_mech
        angles, gen = self.flow.solve(theta_g, loads)
        return GridState(state.t + 1, angles, omega, mech, gen, loads.copy())


def make_stepper(network: NetworkModel, sim: SimConfig, integrator: str = "backward_euler"):
    if integrator == "backward_euler":
        return BackwardEulerStepper(network, sim.dt, sim.governor_form)
    if integrator == "reference":
        return ReferenceStepper(network, sim.dt, sim.governor_form, sim.reference_substeps)
    raise ValueError(f"unknown integrator {integrator!r}")


def step_primary(state: GridState, network: NetworkModel, dispatch: np.ndarray,
                 loads: np.ndarray, dt: float, governor_form: str = "paper_eq3") -> GridState:
    """
    Advance the plant one timeslot with setpoints held and the given loads at t+1

    Raises:
        SingularStep: the implicit step matrix is singular
    """
    if not state.is_finite():
        raise ValueError("state has non-finite entries")
    dispatch = np.asarray(dispatch, dtype=float)
    loads = np.asarray(loads, dtype=float)
    if dispatch.shape != (network.n_generators,) or loads.shape != (network.n_buses,):
        raise ValueError("dispatch must be per generator and loads per bus")
    return BackwardEulerStepper(network, dt, governor_form).step(state, dispatch, loads)


def equilibrium_state(network: NetworkModel, loads: Optional[np.ndarray] = None,
                      t: int = 0) -> GridState:
    """
    Exact operating point for constant loads

    Generation is shared in proportion to 1/R, frequency is nominal and the
    governors are at rest (P_M = P_G).
    """
    loads = network.base_loads if loads is None else np.asarray(loads, dtype=float)
    share = 1.0 / network.generator_array("droop")
    gen = loads.sum() * share / share.sum()
    injection = -loads.copy()
    injection[network.generator_indices] += gen
    keep = [i for i in range(network.n_buses) if i != network.slack_index]
    angles = np.zeros(network.n_buses)
    if keep:
        lap = network.laplacian()[np.ix_(keep, keep)]
        sv = np.linalg.svd(lap, compute_uv=False)
        if sv[-1] <= SINGULAR_TOL * max(sv[0], 1.0):
            raise SingularStep(f"{network.name}: network is not connected")
        angles[keep] = np.linalg.solve(lap, injection[keep])
    omega = np.full(network.n_generators, network.nominal_omega)
    return GridState(t, angles, omega, gen.copy(), gen.copy(), loads.copy())


def _injection_offsets(injection: Any, cycle: int, network: NetworkModel):
    if injection is None:
        return None, None
    load_offset = injection.load_offsets(cycle, network)
    omega_offset = injection.omega_offsets(cycle, network)
    return load_offset, omega_offset


def run_horizon(network: NetworkModel, initial: GridState, sim: SimConfig,
                load_source: np.ndarray, lfc: LfcPolicy, injection: Any = None,
                relay: Optional[RelayConfig] = None,
                integrator: str = "backward_euler") -> Trajectory:
    """
    Closed-loop simulation over sim.horizon timeslots

    At every timeslot t with t % lfc_period == 0 the controller perceives the
    true loads plus the injection of cycle t // lfc_period and fixes the
    setpoints for the next lfc_period steps. The plant always steps with true
    loads.

    Args:
        network: the network
        initial: state at timeslot initial.t
        sim: step size, horizon and LFC period
        load_source: (timeslots, buses) true loads indexed from initial.t;
            row k holds the loads at timeslot initial.t + k
        lfc: controller policy
        injection: optional attack vector with load_offsets/omega_offsets(cycle, network)
        relay: thresholds for the relay monitor, defaults to the network's
        integrator: "backward_euler" or "reference"

    Returns:
        Trajectory with horizon + 1 states, one dispatch record per LFC cycle
    """
    loads = np.asarray(load_source, dtype=float)
    if loads.ndim == 1:
        loads = np.tile(loads, (sim.horizon + 1, 1))
    if loads.shape[0] < sim.horizon + 1 or loads.shape[1] != network.n_buses:
        raise HorizonNotCovered(f"load source has {loads.shape[0]} rows for "
                                f"{sim.horizon} timeslots and {network.n_buses} buses")

    stepper = make_stepper(network, sim, integrator)
    controller = LfcController(network, lfc, initial, sim.dt, sim.governor_form)
    states = [initial]
    state = initial
    p_r = None
    for k in range(sim.horizon):
        t = initial.t + k
        if t % sim.lfc_period == 0 or p_r is None:
            cycle = t // sim.lfc_period
            load_offset, omega_offset = _injection_offsets(injection, cycle, network)
            p_r = controller.start_cycle(cycle, t, state, load_offset, omega_offset)
        state = stepper.step(state, p_r, loads[k + 1])
        _, next_omega_offset = _injection_offsets(injection, (t + 1) // sim.lfc_period, network)
        controller.advance(state, next_omega_offset)
        states.append(state)

    trajectory = Trajectory(
        states=states,
        dispatch=controller.records,
        generator_buses=network.generator_buses,
        base_frequency=network.base_frequency,
        lfc_period=sim.lfc_period,
        alarms=controller.alarms,
    )
    trajectory.relay_events = check_relays(trajectory, relay or network.relay)
    if trajectory.relay_events:
        first = trajectory.relay_events[0]
        logger.debug("first relay event: %s at bus %d, t=%d", first.kind, first.bus, first.timeslot)
    return trajectory


def check_relays(trajectory: Trajectory, relay: RelayConfig) -> List[RelayEvent]:
    """
    First under- and over-frequency crossing per generator bus

    Returns:
        Events ordered by timeslot, then bus; empty when every frequency stays
        strictly inside (uf_threshold, of_threshold)
    """
    if not trajectory.states:
        raise ValueError("empty trajectory")
    freq = trajectory.frequency_hz
    times = np.array([s.t for s in trajectory.states])
    events = []
    for g, bus in enumerate(trajectory.generator_buses):
        under = np.flatnonzero(freq[:, g] <= relay.uf_threshold)
        if under.size:
            k = under[0]
            events.append(RelayEvent(bus, "UF", int(times[k]), float(freq[k, g])))
        over = np.flatnonzero(freq[:, g] >= relay.of_threshold)
        if over.size:
            k = over[0]
            events.append(RelayEvent(bus, "OF", int(times[k]), float(freq[k, g])))
    events.sort(key=lambda e: (e.timeslot, e.bus, e.kind))
    return events


def first_trip(events: Sequence[RelayEvent], kinds: Sequence[str] = ("UF", "OF")) -> Optional[RelayEvent]:
    for event in events:
        if event.kind in kinds:
            return event
    return None


def validation_deviation(trajectory: Trajectory, reference: Trajectory) -> np.ndarray:
    """Max absolute frequency difference in Hz per generator over the common timeslots"""
    steps = min(len(trajectory.states), len(reference.states))
    return np.max(np.abs(trajectory.frequency_hz[:steps] - reference.frequency_hz[:steps]), axis=0)


def dc_flow_residual(state: GridState, network: NetworkModel) -> float:
    """max |P_G - P_L - L delta| over all buses (zero generation at load-only buses)"""
    injected = np.zeros(network.n_buses)
    injected[network.generator_indices] = state.gen_power
    return float(np.max(np.abs(injected - state.load - network.laplacian() @ state.delta)))


def trajectory_rows(trajectory: Trajectory, network: NetworkModel) -> List[Dict[str, Any]]:
    gen_pos = {bus: g for g, bus in enumerate(network.generator_buses)}
    rows = []
    for state in trajectory.states:
        p_r = trajectory.setpoint_at(state.t) if trajectory.dispatch else None
        for bus in network.bus_ids:
            i = bus - 1
            row = {"t": state.t, "bus": bus, "delta_rad": float(state.delta[i]),
                   "omega_pu": None, "freq_hz": None, "p_m": None, "p_g": None,
                   "p_l": float(state.load[i]), "p_r": None}
            if bus in gen_pos:
                g = gen_pos[bus]
                row.update({
                    "omega_pu": float(state.omega[g]),
                    "freq_hz": float(state.omega[g] * network.base_frequency),
                    "p_m": float(state.mech_power[g]),
                    "p_g": float(state.gen_power[g]),
                    "p_r": None if p_r is None else float(p_r[g]),
                })
            rows.append(row)
    return rows


def export_trajectory_csv(trajectory: Trajectory, network: NetworkModel, path: str) -> str:
    """One row per (timeslot, bus); generator columns are empty at load-only buses"""
    return save_csv_file(path, trajectory_rows(trajectory, network), TRAJECTORY_COLUMNS)
