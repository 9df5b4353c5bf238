#!/usr/bin/env python3

"""
Static power-system model: buses, lines, generators and relay thresholds.

Case files are flat JSON documents:

    {
      "name": "case3",
      "base_mva": 100.0,
      "base_frequency_hz": 60.0,
      "relay": {"uf_hz": 59.5, "of_hz": 60.5},
      "buses": [{"id": 1, "type": "slack", "p_load_base": 0.3}, ...],
      "lines": [{"from": 1, "to": 2, "susceptance": 10.0}, ...],
      "generators": [{"bus": 1, "H": 5.0, "R": 0.1, "T": 0.4, "K_D": 1.0,
                      "has_governor": true}, ...]
    }

Powers are per unit on a single system base, frequencies in p.u. of the base
frequency. A line may give "reactance" instead of "susceptance"; it is stored
as 1/x. Parallel lines between the same pair add up.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

# Add parent directory to path so we can import from the repo root
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(SCRIPT_DIR)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import InconsistentCase, MalformedCase, SingularStep
from save_load import load_json_file, save_json_file
from utils.log import get_logger

logger = get_logger("grid_model")

CASES_DIR = os.path.join(SCRIPT_DIR, "cases")
BUS_TYPES = ("slack", "PV", "PQ")
SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class GeneratorParams:
    inertia: float                  # H, seconds
    droop: float                    # R, p.u.
    governor_time_constant: float   # T, seconds
    damping: float                  # K_D, p.u.
    has_governor: bool = True


@dataclass(frozen=True)
class RelayConfig:
    uf_threshold: float  # Hz
    of_threshold: float  # Hz

    def uf_pu(self, base_frequency: float) -> float:
        return self.uf_threshold / base_frequency

    def of_pu(self, base_frequency: float) -> float:
        return self.of_threshold / base_frequency


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    p_load_base: float


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """
    Immutable network description.

    Bus ids are 1..n and bus arrays are indexed by id - 1. Generator quantities
    are ordered by ascending bus id; `generator_buses` gives that order.
    """
    name: str
    buses: Tuple[Bus, ...]
    lines: Tuple[Tuple[int, int, float], ...]
    generators: Dict[int, GeneratorParams]
    susceptance: np.ndarray
    relay: RelayConfig
    base_frequency: float = 60.0
    base_mva: float = 100.0
    nominal_omega: float = 1.0
    _laplacian: np.ndarray = field(default=None, repr=False)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def bus_ids(self) -> List[int]:
        return [bus.id for bus in self.buses]

    @property
    def slack_bus(self) -> int:
        return next(bus.id for bus in self.buses if bus.type == "slack")

    @property
    def slack_index(self) -> int:
        return self.slack_bus - 1

    @property
    def generator_buses(self) -> List[int]:
        return sorted(self.generators)

    @property
    def generator_indices(self) -> np.ndarray:
        """Bus-array positions of the generator buses"""
        return np.array([b - 1 for b in self.generator_buses], dtype=int)

    @property
    def load_only_indices(self) -> np.ndarray:
        """Bus-array positions of buses without a generator"""
        gens = set(self.generator_buses)
        return np.array([bus.id - 1 for bus in self.buses if bus.id not in gens], dtype=int)

    @property
    def slack_generator(self) -> int:
        """Position of the slack generator in generator order"""
        return self.generator_buses.index(self.slack_bus)

    @property
    def base_loads(self) -> np.ndarray:
        return np.array([bus.p_load_base for bus in self.buses], dtype=float)

    @property
    def measured_buses(self) -> List[int]:
        """Buses with a nonzero base load; only these carry load measurements"""
        return [bus.id for bus in self.buses if bus.p_load_base > 0.0]

    def generator_array(self, attribute: str) -> np.ndarray:
        """Per-generator parameter vector in generator order, e.g. 'droop'"""
        return np.array([getattr(self.generators[b], attribute) for b in self.generator_buses],
                        dtype=float)

    def laplacian(self) -> np.ndarray:
        return self._laplacian.copy()


def susceptance_matrix(network: NetworkModel) -> np.ndarray:
    """Symmetric line-susceptance matrix with zero diagonal"""
    return network.susceptance.copy()


def laplacian(network: NetworkModel) -> np.ndarray:
    """
    Laplacian assembly of the DC power flow.

    (L @ delta)[b1] equals sum over b2 of S[b1, b2] * (delta[b1] - delta[b2]),
    so L has the incident susceptance sums on the diagonal and -S elsewhere.
    """
    return network.laplacian()


def _assemble_laplacian(susceptance: np.ndarray) -> np.ndarray:
    return np.diag(susceptance.sum(axis=1)) - susceptance


class DcFlowSolver:
    """
    DC power flow with generator-bus angles given.

    Load-only buses satisfy 0 - (L @ delta)[b] = P_L[b], so their angles follow
    from the generator angles and loads; generator output is then
    P_G = P_L + (L @ delta) at the generator buses.
    """

    def __init__(self, network: NetworkModel):
        self.network = network
        self.lap = network.laplacian()
        self.gen_idx = network.generator_indices
        self.load_idx = network.load_only_indices
        self._from_gen = np.zeros((len(self.load_idx), len(self.gen_idx)))
        self._from_load = np.zeros((len(self.load_idx), len(self.load_idx)))
        if len(self.load_idx):
            l_nn = self.lap[np.ix_(self.load_idx, self.load_idx)]
            l_ng = self.lap[np.ix_(self.load_idx, self.gen_idx)]
            sv = np.linalg.svd(l_nn, compute_uv=False)
            if sv[-1] <= SINGULAR_TOL * max(sv[0], 1.0):
                raise SingularStep("load buses are not connected to any generator")
            lu = lu_factor(l_nn)
            self._from_gen = -lu_solve(lu, l_ng)
            self._from_load = -lu_solve(lu, np.eye(len(self.load_idx)))

    def bus_angles(self, gen_angles: np.ndarray, loads: np.ndarray) -> np.ndarray:
        angles = np.zeros(self.network.n_buses)
        angles[self.gen_idx] = gen_angles
        if len(self.load_idx):
            angles[self.load_idx] = self._from_gen @ gen_angles + self._from_load @ loads[self.load_idx]
        return angles

    def generation(self, angles: np.ndarray, loads: np.ndarray) -> np.ndarray:
        return loads[self.gen_idx] + (self.lap @ angles)[self.gen_idx]

    def solve(self, gen_angles: np.ndarray, loads: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Bus angles and generator outputs for the given generator angles and loads"""
        angles = self.bus_angles(gen_angles, loads)
        return angles, self.generation(angles, loads)


def _require(entry: Dict[str, Any], key: str, where: str) -> Any:
    if not isinstance(entry, dict) or key not in entry:
        raise MalformedCase(f"{where}: missing key '{key}'")
    return entry[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedCase(f"{where}: expected a number, got {value!r}")
    if not np.isfinite(value):
        raise MalformedCase(f"{where}: value must be finite")
    return float(value)


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedCase(f"{where}: expected an integer, got {value!r}")
    return value


def network_from_dict(data: Dict[str, Any]) -> NetworkModel:
    """
    Build and validate a NetworkModel from a parsed case document

    Raises:
        MalformedCase: schema violations (missing keys, wrong types, unknown buses)
        InconsistentCase: parsed values break a network invariant
    """
    if not isinstance(data, dict):
        raise MalformedCase("case document must be a JSON object")
    for key in ("buses", "lines", "generators", "base_frequency_hz", "relay"):
        _require(data, key, "case")
    if not isinstance(data["buses"], list) or not data["buses"]:
        raise MalformedCase("case: 'buses' must be a non-empty list")
    if not isinstance(data["lines"], list) or not isinstance(data["generators"], list):
        raise MalformedCase("case: 'lines' and 'generators' must be lists")

    buses = []
    for i, entry in enumerate(data["buses"]):
        where = f"buses[{i}]"
        bus_id = _integer(_require(entry, "id", where), where)
        bus_type = _require(entry, "type", where)
        if bus_type not in BUS_TYPES:
            raise MalformedCase(f"{where}: type must be one of {BUS_TYPES}, got {bus_type!r}")
        p_load = _number(entry.get("p_load_base", 0.0), where)
        buses.append(Bus(bus_id, bus_type, p_load))
    buses.sort(key=lambda b: b.id)
    n = len(buses)
    if [b.id for b in buses] != list(range(1, n + 1)):
        raise MalformedCase("bus ids must be unique and numbered 1..n")

    susceptance = np.zeros((n, n))
    lines = []
    for i, entry in enumerate(data["lines"]):
        where = f"lines[{i}]"
        f_bus = _integer(_require(entry, "from", where), where)
        t_bus = _integer(_require(entry, "to", where), where)
        if not (1 <= f_bus <= n and 1 <= t_bus <= n):
            raise MalformedCase(f"{where}: unknown bus {f_bus}-{t_bus}")
        if f_bus == t_bus:
            raise MalformedCase(f"{where}: line connects bus {f_bus} to itself")
        if "susceptance" in entry:
            s = _number(entry["susceptance"], where)
        elif "reactance" in entry:
            x = _number(entry["reactance"], where)
            if x == 0.0:
                raise InconsistentCase(f"{where}: zero reactance")
            s = 1.0 / x
        else:
            raise MalformedCase(f"{where}: needs 'susceptance' or 'reactance'")
        if s < 0.0:
            raise InconsistentCase(f"{where}: negative susceptance")
        susceptance[f_bus - 1, t_bus - 1] += s
        susceptance[t_bus - 1, f_bus - 1] += s
        lines.append((f_bus, t_bus, s))

    generators: Dict[int, GeneratorParams] = {}
    for i, entry in enumerate(data["generators"]):
        where = f"generators[{i}]"
        bus_id = _integer(_require(entry, "bus", where), where)
        if not 1 <= bus_id <= n:
            raise MalformedCase(f"{where}: unknown bus {bus_id}")
        if bus_id in generators:
            raise InconsistentCase(f"{where}: second generator at bus {bus_id}")
        has_governor = entry.get("has_governor", True)
        if not isinstance(has_governor, bool):
            raise MalformedCase(f"{where}: has_governor must be a boolean")
        params = GeneratorParams(
            inertia=_number(_require(entry, "H", where), where),
            droop=_number(_require(entry, "R", where), where),
            governor_time_constant=_number(_require(entry, "T", where), where),
            damping=_number(_require(entry, "K_D", where), where),
            has_governor=has_governor,
        )
        if params.inertia <= 0 or params.droop <= 0 or params.governor_time_constant <= 0:
            raise InconsistentCase(f"{where}: H, R and T must be positive")
        if params.damping < 0:
            raise InconsistentCase(f"{where}: K_D must be non-negative")
        generators[bus_id] = params

    relay_data = data["relay"]
    relay = RelayConfig(
        uf_threshold=_number(_require(relay_data, "uf_hz", "relay"), "relay"),
        of_threshold=_number(_require(relay_data, "of_hz", "relay"), "relay"),
    )
    base_frequency = _number(data["base_frequency_hz"], "base_frequency_hz")
    base_mva = _number(data.get("base_mva", 100.0), "base_mva")

    slack = [b.id for b in buses if b.type == "slack"]
    if len(slack) != 1:
        raise InconsistentCase(f"exactly one slack bus required, found {len(slack)}")
    if slack[0] not in generators:
        raise InconsistentCase(f"slack bus {slack[0]} has no generator")
    for bus in buses:
        if bus.type == "PV" and bus.id not in generators:
            raise InconsistentCase(f"PV bus {bus.id} has no generator parameters")
        if bus.type == "PQ" and bus.id in generators:
            raise InconsistentCase(f"PQ bus {bus.id} carries a generator")
        if bus.p_load_base < 0:
            raise InconsistentCase(f"bus {bus.id} has a negative base load")
    if not relay.uf_threshold < base_frequency < relay.of_threshold:
        raise InconsistentCase("relay thresholds must bracket the base frequency")
    if base_frequency <= 0 or base_mva <= 0:
        raise InconsistentCase("base frequency and base MVA must be positive")

    return NetworkModel(
        name=str(data.get("name", "case")),
        buses=tuple(buses),
        lines=tuple(lines),
        generators=generators,
        susceptance=susceptance,
        relay=relay,
        base_frequency=base_frequency,
        base_mva=base_mva,
        _laplacian=_assemble_laplacian(susceptance),
    )


def resolve_case_path(path: str) -> str:
    """Accept a path, or a bare case name shipped in grid_model/cases"""
    if os.path.exists(path):
        return path
    shipped = os.path.join(CASES_DIR, path if path.endswith(".json") else f"{path}.json")
    if os.path.exists(shipped):
        return shipped
    raise MalformedCase(f"case file not found: {path}")


def load_case(path: str) -> NetworkModel:
    """
    Load and validate a case file

    Args:
        path: Case file path, or the name of a shipped case ("case3", "case39")

    Returns:
        A validated NetworkModel
    """
    abs_path = resolve_case_path(path)
    try:
        data = load_json_file(abs_path)
    except ValueError as e:
        raise MalformedCase(f"{abs_path}: not valid JSON ({e})") from e
    network = network_from_dict(data)
    logger.debug("loaded %s: %d buses, %d generators", network.name,
                 network.n_buses, network.n_generators)
    return network


def case_to_dict(network: NetworkModel) -> Dict[str, Any]:
    """Canonical case document; loading it gives back an equal network"""
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "base_frequency_hz": network.base_frequency,
        "relay": {"uf_hz": network.relay.uf_threshold, "of_hz": network.relay.of_threshold},
        "buses": [{"id": b.id, "type": b.type, "p_load_base": b.p_load_base}
                  for b in network.buses],
        "lines": [{"from": f, "to": t, "susceptance": s} for f, t, s in network.lines],
        "generators": [
            {
                "bus": bus,
                "H": g.inertia,
                "R": g.droop,
                "T": g.governor_time_constant,
                "K_D": g.damping,
                "has_governor": g.has_governor,
            }
            for bus, g in sorted(network.generators.items())
        ],
    }


def save_case(network: NetworkModel, path: str) -> bool:
    """Write the canonical case document"""
    return save_json_file(path, case_to_dict(network))


def with_loads(network: NetworkModel, loads: Optional[np.ndarray]) -> NetworkModel:
    """Copy of the network with new base loads (used by scenario overrides)"""
    if loads is None:
        return network
    data = case_to_dict(network)
    for entry, value in zip(data["buses"], loads):
        entry["p_load_base"] = float(value)
    return network_from_dict(data)
