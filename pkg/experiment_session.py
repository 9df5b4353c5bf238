#!/usr/bin/env python3

import hashlib
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

# Get the directory where the script is located
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from adm.adm import AdmModel, BddRule, detector_complexity, train_adm
from attack.attack import (
    AdversaryModel,
    AttackConfig,
    SynthesisResult,
    build_attack_milp,
    find_min_trip_time,
    k_resiliency,
    replay_attack,
    state_at_attack_start,
    truncate_attack,
)
from dynamics.dynamics import SimConfig, Trajectory, equilibrium_state, run_horizon, validation_deviation
from errors import ScenarioError
from grid_model.grid_model import NetworkModel, load_case, resolve_case_path
from ingest.ingest import (
    build_load_table,
    impute_curve_fit,
    load_bus_mapping,
    load_hourly_csv,
    synthetic_loads,
)
from lfc.lfc import LfcPolicy, ValidationConfig
from optimizer.optimizer import BigMConfig, SolveLimits, solve_milp
from save_load import canonical_json, load_json_file, load_settings
from utils.log import get_logger

logger = get_logger("experiment_session")

# Case studies the harness can reproduce
CASE_STUDIES = {
    1: "Benign response of the system under measured loads",
    2: "Stealthy attack against the rules-based bad data detector",
    3: "Stealthy attack against the ML-based anomaly detector",
    4: "Attack discontinued before the trip, frequency recovery",
}

DETECTOR_ALIASES = {"none": "none", "bdd": "rules_bdd", "adm": "ml_adm",
                    "rules_bdd": "rules_bdd", "ml_adm": "ml_adm"}
DEFENSES = ("none", "rules_bdd", "ml_adm")
GOALS = ("uf", "of")

# Settings sections a scenario may override
SETTINGS_SECTIONS = ("simulation", "lfc", "adm", "bdd", "optimizer", "attack", "ingest", "synthetic")


@dataclass
class Scenario:
    name: str
    case: str
    settings: Dict[str, Any]
    detector_mode: str = "rules_bdd"
    goal: str = "uf"
    access: Any = "all"
    attack_start: int = 0
    max_duration: int = 30
    load_source: Dict[str, Any] = field(default_factory=lambda: {"type": "synthetic"})
    output_dir: str = "output"
    seed: int = 0
    case_study: Dict[str, Any] = field(default_factory=dict)
    base_dir: str = "."
    document: Dict[str, Any] = field(default_factory=dict)

    @property
    def sim(self) -> SimConfig:
        return SimConfig.from_settings(self.settings["simulation"])


@dataclass
class ExperimentReport:
    name: str
    scenario_digest: str
    network: NetworkModel
    summary: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    trajectories: Dict[str, Trajectory] = field(default_factory=dict)
    verification: List[Dict[str, Any]] = field(default_factory=list)


def normalize_detector(value: str) -> str:
    try:
        return DETECTOR_ALIASES[value]
    except KeyError:
        raise ScenarioError(f"unknown detector {value!r}") from None


def scenario_from_dict(data: Dict[str, Any], base_dir: str = ".",
                       overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    """
    Build a scenario from its JSON document

    Settings sections in the document are merged over utils/settings.json;
    `overrides` (CLI values) are applied last.
    """
    doc = dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in SETTINGS_SECTIONS and isinstance(value, dict):
            doc[key] = {**doc.get(key, {}), **value}
        else:
            doc[key] = value
    settings = load_settings({k: doc[k] for k in SETTINGS_SECTIONS if k in doc})
    adversary = doc.get("adversary", {})
    if "case" not in doc:
        raise ScenarioError("scenario names no case")
    return Scenario(
        name=str(doc.get("name", "scenario")),
        case=str(doc["case"]),
        settings=settings,
        detector_mode=normalize_detector(doc.get("detector", "rules_bdd")),
        goal=str(doc.get("goal", "uf")).lower(),
        access=doc.get("access", "all"),
        attack_start=int(adversary.get("attack_start", 0)),
        max_duration=int(doc.get("horizon") or adversary.get("max_duration", 30)),
        load_source=dict(doc.get("load_source", {"type": "synthetic"})),
        output_dir=str(doc.get("output_dir", "output")),
        seed=int(doc.get("seed", 0)),
        case_study=dict(doc.get("case_study", {})),
        base_dir=base_dir,
        document=doc,
    )


def load_scenario(path: str, overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    """Read a scenario JSON file; relative paths inside it resolve against its directory"""
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file not found: {path}")
    data = load_json_file(path)
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: scenario must be a JSON object")
    return scenario_from_dict(data, os.path.dirname(os.path.abspath(path)), overrides)


def scenario_digest(scenario: Scenario) -> str:
    """Short hash of the resolved scenario, settings included"""
    doc = {"scenario": scenario.document, "settings": scenario.settings}
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]


def top_load_buses(network: NetworkModel, k: int) -> List[int]:
    """The k buses with the highest base load, ties by bus id"""
    ranked = sorted(network.measured_buses, key=lambda b: (-network.base_loads[b - 1], b))
    return sorted(ranked[:k])


def parse_access(value: Any, network: NetworkModel) -> List[int]:
    """
    "all", a count k (highest-load buses) or an explicit bus list

    On the command line "3" means k = 3 while "3," and "1,3" are bus lists.
    """
    if value is None or value == "all":
        return list(network.measured_buses)
    if isinstance(value, str):
        try:
            if "," in value:
                value = [int(p) for p in value.split(",") if p.strip()]
            else:
                value = int(value)
        except ValueError:
            raise ScenarioError(f"cannot read access {value!r}") from None
    if isinstance(value, int):
        measured = len(network.measured_buses)
        if value > measured:
            logger.warning("access %d clamped to %d measured buses", value, measured)
            value = measured
        return top_load_buses(network, max(value, 0))
    buses = sorted(int(b) for b in value)
    unknown = set(buses) - set(network.bus_ids)
    if unknown:
        raise ScenarioError(f"access lists unknown buses {sorted(unknown)}")
    return buses


class ExperimentSession:
    """
    Everything one scenario needs, built on first use: network, settings
    objects, benign operating point, training series and detectors.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        settings = scenario.settings
        try:
            self.network = load_case(resolve_case_path(scenario.case))
        except FileNotFoundError as e:
            raise ScenarioError(str(e)) from e
        self.sim = scenario.sim
        self.attack_config = AttackConfig.from_settings(settings["attack"])
        self.limits = SolveLimits.from_settings(settings["optimizer"])
        self.bigm = BigMConfig.from_settings(settings["optimizer"])
        self.bdd = BddRule(float(settings["bdd"]["max_deviation"]))
        self.validation = ValidationConfig.from_settings(settings["lfc"], self.network.base_frequency)
        self.benign = self.network.base_loads
        self.digest = scenario_digest(scenario)
        self._series = None
        self._adm: Optional[AdmModel] = None
        self._syntheses: Dict[tuple, SynthesisResult] = {}

    @property
    def initial(self):
        return equilibrium_state(self.network, self.benign)

    def load_series(self):
        """Per-bus gap-free series from the dataset, or the synthetic fallback"""
        if self._series is not None:
            return self._series
        source = self.scenario.load_source
        kind = source.get("type", "synthetic")
        if kind == "synthetic":
            self._series = synthetic_loads(self.network, self.scenario.settings["synthetic"], self.scenario.seed)
        elif kind == "dataset":
            path = self._resolve(source.get("path") or os.environ.get("LFC_GEFCOM_TABLE", ""))
            mapping = None
            if source.get("bus_mapping"):
                mapping = load_bus_mapping(self._resolve(source["bus_mapping"]))
            ingest = self.scenario.settings["ingest"]
            raw = load_hourly_csv(path, self.network, mapping, float(ingest.get("base_mva", self.network.base_mva)),
                                  int(source.get("interval_minutes", 60)))
            self._series = {bus: impute_curve_fit(s, int(ingest["degree"]), int(ingest["window"]))
                            for bus, s in raw.items()}
        else:
            raise ScenarioError(f"unknown load source {kind!r}")
        return self._series

    def _resolve(self, path: str) -> str:
        if not path:
            raise ScenarioError("dataset load source needs a path (or LFC_GEFCOM_TABLE)")
        full = path if os.path.isabs(path) else os.path.join(self.scenario.base_dir, path)
        if not os.path.exists(full):
            raise ScenarioError(f"file not found: {full}")
        return full

    def training_series(self) -> Dict[int, np.ndarray]:
        """Per-cycle benign loads per bus for detector training"""
        return {bus: s.values for bus, s in self.load_series().items()}

    def load_table(self) -> np.ndarray:
        return build_load_table(self.network, self.load_series(), self.sim.lfc_period)

    def adm(self) -> AdmModel:
        if self._adm is None:
            params = self.scenario.settings["adm"]
            self._adm = train_adm(self.training_series(), float(params["eps"]), int(params["min_pts"]),
                                  int(params["lookback"]), float(params["degenerate_margin"]))
        return self._adm

    def detector(self, mode: str):
        if mode == "ml_adm":
            return self.adm()
        if mode == "rules_bdd":
            return self.bdd
        return None

    def adversary(self, mode: str, buses: Optional[Sequence[int]] = None,
                  max_duration: Optional[int] = None) -> AdversaryModel:
        if buses is None:
            buses = parse_access(self.scenario.access, self.network)
        return AdversaryModel.from_buses(self.network, buses,
                                         attack_start=self.scenario.attack_start,
                                         max_duration=max_duration or self.scenario.max_duration,
                                         detector_mode=mode)

    def synthesize(self, mode: str, goal: str, buses: Optional[Sequence[int]] = None) -> SynthesisResult:
        """Minimal-trip-time attack, memoized per (mode, goal, buses)"""
        adversary = self.adversary(mode, buses)
        key = (mode, goal, tuple(adversary.accessible_buses(self.network)))
        if key not in self._syntheses:
            logger.info("synthesizing %s/%s attack with buses %s", mode, goal, list(key[2]))
            self._syntheses[key] = find_min_trip_time(
                self.network, self.sim, self.initial, self.benign, adversary, self.detector(mode),
                self.network.relay, goal, self.attack_config, self.limits, self.bigm)
        return self._syntheses[key]

    def replay(self, result: SynthesisResult, mode: str, verify: bool = True,
               horizon: Optional[int] = None, integrator: str = "backward_euler"):
        return replay_attack(result.attack, self.network, self.sim, self.initial, self.benign,
                             self.detector(mode), self.network.relay, result if verify else None,
                             verify, horizon=horizon, integrator=integrator)

    def new_report(self, name: str) -> ExperimentReport:
        return ExperimentReport(name, self.digest, self.network)


def _synthesis_summary(result: SynthesisResult) -> Dict[str, Any]:
    if not result.feasible:
        return {"feasible": False, "horizon_cycles": result.horizon_cycles}
    return {
        "feasible": True,
        "trip_kind": result.trip_event.kind,
        "trip_bus": result.trip_event.bus,
        "trip_timeslot": result.trip_timeslot,
        "timeslots_to_goal": result.timeslots_to_goal,
        "lfc_cycles_to_goal": result.lfc_cycles_to_goal,
        "horizon_cycles": result.horizon_cycles,
        "exhaustive": result.exhaustive,
    }


def _final_deviation_hz(trajectory: Trajectory) -> float:
    return float(np.max(np.abs(trajectory.frequency_hz[-1] - trajectory.base_frequency)))


def _case_benign(session: ExperimentSession, report: ExperimentReport) -> None:
    sim = session.sim
    table = session.load_table()
    horizon = min(sim.horizon, table.shape[0] - 1)
    initial = equilibrium_state(session.network, table[0])
    trajectory = run_horizon(session.network, initial, replace(sim, horizon=horizon), table,
                             LfcPolicy(validator=session.validation))
    report.trajectories["benign"] = trajectory
    report.summary.update({
        "relay_events": len(trajectory.relay_events),
        "final_max_deviation_hz": _final_deviation_hz(trajectory),
        "max_deviation_hz": float(np.max(np.abs(trajectory.frequency_hz - trajectory.base_frequency))),
        "horizon": horizon,
    })


def attack_report(session: ExperimentSession, mode: str, goal: str,
                  name: str = "attack") -> Tuple[ExperimentReport, SynthesisResult]:
    """
    Synthesize the minimal-trip-time attack, replay it verified, then show the
    same measurements to the other detector

    Raises:
        VerificationMismatch: the replay disagrees with the MILP
    """
    report = session.new_report(name)
    result = session.synthesize(mode, goal)
    report.summary.update(_synthesis_summary(result))
    report.tables["solves"] = [dict(s) for s in result.solves]
    if not result.feasible:
        return report, result
    trajectory, replay = session.replay(result, mode)
    report.trajectories["attack"] = trajectory
    report.verification.append({"detector": mode, **replay.as_dict()})
    report.summary["pre_trip_alarms"] = replay.pre_trip_alarms
    # the same measurements shown to the other detector
    other = "ml_adm" if mode == "rules_bdd" else "rules_bdd"
    _, cross = replay_attack(result.attack, session.network, session.sim, session.initial, session.benign,
                             session.detector(other), session.network.relay, verify=False)
    report.verification.append({"detector": other, **cross.as_dict()})
    report.summary[f"{other}_pre_trip_alarms"] = cross.pre_trip_alarms
    if mode == "ml_adm":
        training = sum(len(s) for s in session.training_series().values())
        report.tables["detector_complexity"] = detector_complexity(session.adm(), training)
    return report, result


def _case_discontinued(session: ExperimentSession, report: ExperimentReport) -> None:
    scenario = session.scenario
    mode = scenario.detector_mode
    result = session.synthesize(mode, scenario.goal)
    report.summary.update({"synthesized": _synthesis_summary(result)})
    if not result.feasible:
        report.summary["feasible"] = False
        return
    options = scenario.case_study
    stop = min(int(options.get("stop_cycles", 16)), max(1, result.attack.n_cycles // 2))
    recovery = int(options.get("recovery_cycles", 40))
    truncated = truncate_attack(result.attack, stop)
    p = session.sim.lfc_period
    horizon = (truncated.end_cycle + recovery) * p
    trajectory, replay = replay_attack(truncated, session.network, session.sim, session.initial,
                                       session.benign, session.detector(mode), session.network.relay,
                                       verify=False, horizon=horizon)
    report.trajectories["discontinued"] = trajectory
    report.verification.append({"detector": mode, **replay.as_dict()})
    report.summary.update({
        "feasible": True,
        "stop_cycles": stop,
        "attack_end_timeslot": truncated.end_cycle * p,
        "tripped": replay.tripped,
        "final_max_deviation_hz": _final_deviation_hz(trajectory),
    })


def run_case_study(case_id: int, session: ExperimentSession) -> ExperimentReport:
    """
    Reproduce one case study

    Args:
        case_id: 1 benign, 2 BDD attack, 3 ADM attack, 4 discontinued attack

    Raises:
        VerificationMismatch: a synthesized attack does not replay as predicted
    """
    if case_id not in CASE_STUDIES:
        raise ScenarioError(f"unknown case study {case_id}")
    name = f"case_study_{case_id}"
    logger.info("case study %d: %s", case_id, CASE_STUDIES[case_id])
    if case_id in (2, 3):
        mode = "rules_bdd" if case_id == 2 else "ml_adm"
        report, _ = attack_report(session, mode, session.scenario.goal, name)
    else:
        report = session.new_report(name)
        if case_id == 1:
            _case_benign(session, report)
        else:
            _case_discontinued(session, report)
    report.summary["description"] = CASE_STUDIES[case_id]
    return report


def accessibility_sweep(session: ExperimentSession, k_values: Sequence[int],
                        defenses: Sequence[str] = DEFENSES, goals: Sequence[str] = GOALS) -> ExperimentReport:
    """
    Minimal trip time with the k highest-load buses accessible

    Every feasible cell is replayed and verified before it enters the table.
    """
    report = session.new_report("accessibility_sweep")
    measured = len(session.network.measured_buses)
    rows = []
    for defense in defenses:
        for goal in goals:
            for k in sorted(set(k_values)):
                if k > measured:
                    logger.warning("k=%d clamped to %d measured buses", k, measured)
                size = min(k, measured)
                buses = top_load_buses(session.network, size)
                row = {"defense": defense, "goal": goal, "k": k, "buses": " ".join(map(str, buses)),
                       "feasible": False, "timeslots": None, "cycles": None}
                if size > 0:
                    result = session.synthesize(defense, goal, buses)
                    if result.feasible:
                        _, replay = session.replay(result, defense)
                        report.verification.append({"defense": defense, "goal": goal, "k": k, **replay.as_dict()})
                        row.update({"feasible": True, "timeslots": result.timeslots_to_goal,
                                    "cycles": result.lfc_cycles_to_goal})
                logger.info("sweep %s/%s k=%d: %s", defense, goal, k, row["timeslots"])
                rows.append(row)
    report.tables["accessibility"] = rows
    return report


def resiliency_experiment(session: ExperimentSession, horizons: Sequence[int],
                          defenses: Sequence[str] = DEFENSES, goals: Sequence[str] = GOALS) -> ExperimentReport:
    """
    k-resiliency per (defense, goal, horizon)

    Args:
        horizons: attack time budgets in timeslots, rounded down to whole LFC cycles
    """
    report = session.new_report("resiliency")
    p = session.sim.lfc_period
    rows = []
    for defense in defenses:
        for goal in goals:
            for horizon in sorted(set(horizons)):
                cycles = max(1, horizon // p)
                adversary = session.adversary(defense, max_duration=max(cycles, session.scenario.max_duration))
                result = k_resiliency(session.network, session.sim, session.initial, session.benign, adversary,
                                      session.detector(defense), cycles, session.network.relay, goal,
                                      session.attack_config, session.limits, session.bigm, session.scenario.seed)
                rows.append({"defense": defense, "goal": goal, "horizon_timeslots": horizon,
                             "horizon_cycles": cycles, "k": result.label, "bound": result.bound})
                logger.info("resiliency %s/%s horizon %d: k=%s", defense, goal, horizon, result.label)
    report.tables["resiliency"] = rows
    return report


def scalability_bench(session: ExperimentSession, horizons: Sequence[int],
                      defenses: Sequence[str] = DEFENSES, goals: Sequence[str] = ("uf",),
                      repeats: int = 3) -> ExperimentReport:
    """
    Wall time of building and solving the attack MILP per horizon, median of `repeats` runs,
    with a least-squares line per (defense, goal)
    """
    report = session.new_report("scalability")
    p = session.sim.lfc_period
    rows, fits = [], []
    start = state_at_attack_start(session.network, session.sim, session.initial, session.benign,
                                  session.scenario.attack_start * p)
    for defense in defenses:
        for goal in goals:
            points = []
            for horizon in sorted(set(horizons)):
                cycles = max(1, horizon // p)
                adversary = session.adversary(defense, max_duration=max(cycles, session.scenario.max_duration))
                times = []
                status = None
                for _ in range(repeats):
                    began = time.perf_counter()
                    milp = build_attack_milp(session.network, session.sim, start, session.benign, adversary,
                                             session.detector(defense), session.network.relay, cycles, goal,
                                             session.attack_config, session.bigm)
                    status = solve_milp(milp.model, session.limits).status.value
                    times.append(time.perf_counter() - began)
                seconds = float(np.median(times))
                points.append((cycles * p, seconds))
                rows.append({"defense": defense, "goal": goal, "timeslots": cycles * p,
                             "variables": milp.model.n_variables, "status": status, "wall_seconds": seconds})
                logger.info("bench %s/%s %d timeslots: %.3fs", defense, goal, cycles * p, seconds)
            if len(points) >= 2:
                x, y = zip(*points)
                fit = linregress(x, y)
                fits.append({"defense": defense, "goal": goal, "slope": float(fit.slope),
                             "intercept": float(fit.intercept), "r2": float(fit.rvalue ** 2)})
    report.tables["scalability"] = rows
    report.tables["scalability_fit"] = fits
    return report


def validation_experiment(session: ExperimentSession, case_ids: Sequence[int] = (1, 2, 3)) -> ExperimentReport:
    """Implicit simulator against the fine-step reference, max |df| in Hz per generator"""
    report = session.new_report("validation")
    rows = []
    for case_id in case_ids:
        if case_id == 1:
            table = session.load_table()
            horizon = min(session.sim.horizon, table.shape[0] - 1)
            sim = replace(session.sim, horizon=horizon)
            initial = equilibrium_state(session.network, table[0])
            runs = [run_horizon(session.network, initial, sim, table, LfcPolicy(), integrator=name)
                    for name in ("backward_euler", "reference")]
        else:
            mode = "rules_bdd" if case_id == 2 else "ml_adm"
            result = session.synthesize(mode, session.scenario.goal)
            if not result.feasible:
                continue
            runs = [session.replay(result, mode, verify=False, integrator=name)[0]
                    for name in ("backward_euler", "reference")]
        deviation = validation_deviation(runs[0], runs[1])
        for bus, value in zip(session.network.generator_buses, deviation):
            rows.append({"case_study": case_id, "bus": bus, "max_deviation_hz": float(value)})
    report.tables["validation"] = rows
    return report


def synthesis_exit_code(result: Optional[SynthesisResult]) -> int:
    """0 when an attack exists, 2 when none does by design"""
    return 0 if result is not None and result.feasible else 2
