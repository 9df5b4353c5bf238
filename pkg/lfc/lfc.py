#!/usr/bin/env python3

"""
Secondary load-frequency controller.

Every LFC cycle the controller takes perceived loads and perceived generator
frequencies, runs a DC state estimation (estimated rotor angles integrated
from perceived frequency, then the DC flow with perceived loads) and sends
droop-scaled reference setpoints to the governors.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from grid_model.grid_model import DcFlowSolver, NetworkModel
from save_load import save_csv_file
from utils.log import get_logger

logger = get_logger("lfc")

LFC_MODES = ("secondary_dispatch", "frozen")
ON_INVALID = ("alarm", "freeze")
GOVERNOR_FORMS = ("paper_eq3", "standard")
DISPATCH_LOG_COLUMNS = ["cycle", "bus", "p_gc", "p_r", "valid_flag"]


@dataclass(frozen=True)
class ValidationConfig:
    load_tol: float = 0.05       # p.u.
    freq_tol_hz: float = 0.2     # Hz
    base_frequency: float = 60.0

    @classmethod
    def from_settings(cls, section: Dict[str, Any], base_frequency: float = 60.0) -> "ValidationConfig":
        return cls(load_tol=float(section.get("load_tol", cls.load_tol)),
                   freq_tol_hz=float(section.get("freq_tol_hz", cls.freq_tol_hz)),
                   base_frequency=base_frequency)


@dataclass(frozen=True)
class LfcPolicy:
    mode: str = "secondary_dispatch"
    validator: Optional[ValidationConfig] = None
    on_invalid: str = "alarm"

    def __post_init__(self):
        if self.mode not in LFC_MODES:
            raise ValueError(f"unknown LFC mode {self.mode!r}")
        if self.on_invalid not in ON_INVALID:
            raise ValueError(f"unknown invalid-measurement response {self.on_invalid!r}")


@dataclass
class LfcPerception:
    perceived_loads: np.ndarray   # per bus
    perceived_omega: np.ndarray   # per generator
    estimated_delta: np.ndarray   # per generator, slack-referenced
    estimated_gen: np.ndarray     # per generator
    estimated_mech: np.ndarray    # per generator, logged only
    bus_angles: np.ndarray        # per bus, generator entries equal estimated_delta


@dataclass
class DispatchRecord:
    cycle: int
    t: int
    perception: LfcPerception
    p_r: np.ndarray
    valid: bool = True


def integrate_estimated_angles(delta_c: np.ndarray, omega_c: np.ndarray,
                               network: NetworkModel, dt: float) -> np.ndarray:
    """
    One Backward-Euler step of d(delta_C)/dt = omega_C - omega_R, slack-referenced.

    Args:
        delta_c: estimated generator angles at t
        omega_c: perceived generator frequencies at t+1
    """
    slack = network.slack_generator
    updated = delta_c + dt * (omega_c - omega_c[slack])
    updated[slack] = 0.0
    return updated


def estimate_state(perceived_loads: np.ndarray, perceived_omega: np.ndarray,
                   estimated_delta: np.ndarray, network: NetworkModel,
                   estimated_mech: Optional[np.ndarray] = None,
                   flow: Optional[DcFlowSolver] = None) -> LfcPerception:
    """
    DC state estimation for one LFC cycle

    Args:
        perceived_loads: loads as the controller sees them, per bus
        perceived_omega: generator frequencies as the controller sees them
        estimated_delta: estimated generator angles integrated from perceived frequency
        network: the network
        estimated_mech: mirrored mechanical power, carried through for the log
        flow: prebuilt DC flow solver for the network

    Returns:
        LfcPerception whose generator estimate satisfies the DC flow with the
        perceived loads at every bus
    """
    flow = flow or DcFlowSolver(network)
    loads = np.asarray(perceived_loads, dtype=float)
    angles, gen = flow.solve(np.asarray(estimated_delta, dtype=float), loads)
    mech = gen.copy() if estimated_mech is None else np.asarray(estimated_mech, dtype=float)
    return LfcPerception(
        perceived_loads=loads.copy(),
        perceived_omega=np.asarray(perceived_omega, dtype=float).copy(),
        estimated_delta=angles[network.generator_indices].copy(),
        estimated_gen=gen,
        estimated_mech=mech.copy(),
        bus_angles=angles,
    )


def dispatch(perception: LfcPerception, network: NetworkModel,
             governor_form: str = "paper_eq3") -> np.ndarray:
    """
    Reference setpoints for the governors.

    With the governor written as (P_R - dw)/R the setpoint is R * P_GC, which
    makes the estimated generation a fixed point. The textbook governor
    P_R - dw/R takes P_GC itself.
    """
    if governor_form == "standard":
        return perception.estimated_gen.copy()
    return network.generator_array("droop") * perception.estimated_gen


def validate_measurements(prev: LfcPerception, curr: LfcPerception,
                          config: ValidationConfig) -> bool:
    """
    False for the invalid pattern: loads barely move while frequencies jump

    Returns:
        False iff max |dP_LC| <= load_tol and max |dw_C| (in Hz) > freq_tol_hz
    """
    load_step = np.max(np.abs(curr.perceived_loads - prev.perceived_loads), initial=0.0)
    freq_step = np.max(np.abs(curr.perceived_omega - prev.perceived_omega), initial=0.0)
    freq_step_hz = freq_step * config.base_frequency
    return not (load_step <= config.load_tol and freq_step_hz > config.freq_tol_hz)


def mirror_mechanical(mech_c: np.ndarray, omega_c: np.ndarray, p_r: np.ndarray,
                      network: NetworkModel, dt: float, governor_form: str) -> np.ndarray:
    """Governor update run on perceived quantities; the result is only logged"""
    droop = network.generator_array("droop")
    tau = network.generator_array("governor_time_constant")
    governed = np.array([network.generators[b].has_governor for b in network.generator_buses])
    c = dt / tau
    omega_r = network.nominal_omega
    if governor_form == "standard":
        target = p_r - (omega_c - omega_r) / droop
    else:
        target = (p_r - (omega_c - omega_r)) / droop
    updated = (mech_c + c * target) / (1.0 + c)
    return np.where(governed, updated, mech_c)


class LfcController:
    """
    Per-run controller state: estimated angles, mirrored mechanical power,
    the setpoints in force and the dispatch/alarm history.
    """

    def __init__(self, network: NetworkModel, policy: LfcPolicy, initial_state: Any,
                 dt: float, governor_form: str = "paper_eq3"):
        self.network = network
        self.policy = policy
        self.dt = dt
        self.governor_form = governor_form
        self.flow = DcFlowSolver(network)
        # Seeded from the true plant state
        self.delta_c = np.asarray(initial_state.delta, dtype=float)[network.generator_indices].copy()
        self.mech_c = np.asarray(initial_state.mech_power, dtype=float).copy()
        self.p_r: Optional[np.ndarray] = None
        self.records: List[DispatchRecord] = []
        self.alarms: List[Dict[str, Any]] = []
        self._previous: Optional[LfcPerception] = None

    def start_cycle(self, cycle: int, t: int, state: Any,
                    load_offset: Optional[np.ndarray] = None,
                    omega_offset: Optional[np.ndarray] = None) -> np.ndarray:
        """Perceive, estimate, validate and dispatch; returns the setpoints for the cycle"""
        perceived_loads = np.asarray(state.load, dtype=float).copy()
        if load_offset is not None:
            perceived_loads = perceived_loads + load_offset
        perceived_omega = np.asarray(state.omega, dtype=float).copy()
        if omega_offset is not None:
            perceived_omega = perceived_omega + omega_offset

        perception = estimate_state(perceived_loads, perceived_omega, self.delta_c,
                                    self.network, self.mech_c, self.flow)
        valid = True
        if self.policy.validator is not None and self._previous is not None:
            valid = validate_measurements(self._previous, perception, self.policy.validator)
            if not valid:
                logger.info("cycle %d: measurement validation failed", cycle)
                self.alarms.append({"cycle": cycle, "t": t, "detector": "validator"})

        proposed = dispatch(perception, self.network, self.governor_form)
        if self.p_r is None:
            self.p_r = proposed
        elif self.policy.mode == "frozen":
            pass
        elif not valid and self.policy.on_invalid == "freeze":
            pass
        else:
            self.p_r = proposed

        self.records.append(DispatchRecord(cycle, t, perception, self.p_r.copy(), valid))
        self._previous = perception
        return self.p_r

    def advance(self, state: Any, omega_offset: Optional[np.ndarray] = None) -> None:
        """Integrate the controller's own estimates over one plant step"""
        omega_c = np.asarray(state.omega, dtype=float)
        if omega_offset is not None:
            omega_c = omega_c + omega_offset
        self.delta_c = integrate_estimated_angles(self.delta_c, omega_c, self.network, self.dt)
        if self.p_r is not None:
            self.mech_c = mirror_mechanical(self.mech_c, omega_c, self.p_r, self.network,
                                            self.dt, self.governor_form)


def dispatch_log_rows(records: List[DispatchRecord], network: NetworkModel) -> List[Dict[str, Any]]:
    rows = []
    for record in records:
        for k, bus in enumerate(network.generator_buses):
            rows.append({
                "cycle": record.cycle,
                "bus": bus,
                "p_gc": float(record.perception.estimated_gen[k]),
                "p_r": float(record.p_r[k]),
                "valid_flag": int(record.valid),
            })
    return rows


def export_dispatch_log(records: List[DispatchRecord], network: NetworkModel, path: str) -> str:
    """Dispatch log CSV: cycle, bus, p_gc, p_r, valid_flag"""
    return save_csv_file(path, dispatch_log_rows(records, network), DISPATCH_LOG_COLUMNS)
