#!/usr/bin/env python3

import os
import sys
from typing import Any, Callable, Dict, List

# Get the directory where the script is located
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from errors import ScenarioError
from utils.log import get_logger

logger = get_logger("wrapper")

# Verbs the command line understands
VERBS = {
    "simulate": "Closed-loop benign simulation over the scenario's load table",
    "train-adm": "Train the clustering anomaly detector and save its hulls",
    "attack": "Synthesize the minimal-trip-time stealthy attack and verify it by replay",
    "replay": "Re-simulate a saved attack vector through the closed loop",
    "sweep-access": "Minimal trip time against the number of accessible buses",
    "resiliency": "k-resiliency per defense, goal and attack horizon",
    "bench": "Synthesis wall time against the attack horizon",
    "case-study": "Reproduce the benign, BDD, ADM and discontinued-attack case studies",
    "validate": "Implicit simulator against the fine-step reference integrator",
}

DEFAULT_K_VALUES = [1, 2, 3, 4, 5]
# Horizons in LFC cycles; scaled by the scenario's LFC period
DEFAULT_RESILIENCY_CYCLES = [5, 10]
DEFAULT_BENCH_CYCLES = [4, 8, 12]

# Verb functions mapping - import only when needed to keep startup light
VERB_FUNCTIONS: Dict[str, Callable] = {}


def _output_dir(session, args, name: str) -> str:
    return os.path.join(args.out or session.scenario.output_dir, name)


def _emit(report, session, args) -> List[str]:
    from report import emit_plot_data
    return emit_plot_data(report, _output_dir(session, args, report.name))


def _defenses(args) -> List[str]:
    from experiment_session import DEFENSES, normalize_detector
    if args.detector:
        return [normalize_detector(args.detector)]
    return list(DEFENSES)


def _goals(args) -> List[str]:
    from experiment_session import GOALS
    if args.goal:
        return [args.goal]
    return list(GOALS)


def run_simulate(session, args) -> int:
    from dynamics.dynamics import export_trajectory_csv
    from experiment_session import run_case_study
    from lfc.lfc import export_dispatch_log
    report = run_case_study(1, session)
    report.name = "simulate"
    paths = _emit(report, session, args)
    trajectory = report.trajectories["benign"]
    out_dir = _output_dir(session, args, report.name)
    export_trajectory_csv(trajectory, session.network, os.path.join(out_dir, "trajectory.csv"))
    export_dispatch_log(trajectory.dispatch, session.network, os.path.join(out_dir, "dispatch.csv"))
    print(f"Simulated {report.summary['horizon']} timeslots, "
          f"{report.summary['relay_events']} relay events, {len(paths)} files written")
    return 0


def run_train_adm(session, args) -> int:
    from adm.adm import detector_complexity, save_adm
    model = session.adm()
    report = session.new_report("train_adm")
    training = sum(len(s) for s in session.training_series().values())
    report.tables["detector_complexity"] = detector_complexity(model, training)
    report.summary["hulls"] = {str(bus): len(hulls) for bus, hulls in sorted(model.per_bus.items())}
    _emit(report, session, args)
    path = os.path.join(_output_dir(session, args, report.name), "adm_model.json")
    save_adm(model, path)
    print(f"Trained ADM on {training} samples, model saved to {path}")
    return 0


def run_attack(session, args) -> int:
    from attack.attack import save_attack
    from experiment_session import attack_report, synthesis_exit_code
    scenario = session.scenario
    report, result = attack_report(session, scenario.detector_mode, scenario.goal)
    _emit(report, session, args)
    if not result.feasible:
        print(f"No stealthy attack reaches the goal within {result.horizon_cycles} LFC cycles")
        return synthesis_exit_code(result)
    path = os.path.join(_output_dir(session, args, report.name), "attack.json")
    save_attack(result.attack, path)
    print(f"{result.trip_event.kind.upper()} trip at bus {result.trip_event.bus} after "
          f"{result.timeslots_to_goal} timeslots ({result.lfc_cycles_to_goal} LFC cycles); attack saved to {path}")
    return synthesis_exit_code(result)


def run_replay(session, args) -> int:
    from adm.adm import export_alarm_log
    from attack.attack import load_attack, replay_attack
    from experiment_session import normalize_detector
    if not args.attack_file:
        raise ScenarioError("replay needs --attack-file")
    attack = load_attack(args.attack_file)
    mode = normalize_detector(args.detector) if args.detector else attack.detector_mode
    trajectory, replay = replay_attack(attack, session.network, session.sim, session.initial, session.benign,
                                       session.detector(mode), session.network.relay,
                                       verify=attack.predicted_trip_timeslot is not None)
    report = session.new_report("replay")
    report.trajectories["replay"] = trajectory
    report.verification.append({"detector": mode, **replay.as_dict()})
    report.summary.update(replay.as_dict())
    _emit(report, session, args)
    export_alarm_log(replay.alarms, os.path.join(_output_dir(session, args, report.name), "alarms.csv"))
    print(f"Replay: trip at t={replay.trip_timeslot}, {replay.pre_trip_alarms} alarms before the trip")
    return 0


def run_sweep_access(session, args) -> int:
    from experiment_session import accessibility_sweep
    report = accessibility_sweep(session, args.k_values or DEFAULT_K_VALUES, _defenses(args), _goals(args))
    _emit(report, session, args)
    for row in report.tables["accessibility"]:
        print(f"{row['defense']:>9} {row['goal']} k={row['k']}: {row['timeslots'] if row['feasible'] else 'infeasible'}")
    return 0


def _horizons(session, args, default_cycles: List[int]) -> List[int]:
    if args.horizons:
        return args.horizons
    return [c * session.sim.lfc_period for c in default_cycles]


def run_resiliency(session, args) -> int:
    from experiment_session import resiliency_experiment
    report = resiliency_experiment(session, _horizons(session, args, DEFAULT_RESILIENCY_CYCLES),
                                   _defenses(args), _goals(args))
    _emit(report, session, args)
    for row in report.tables["resiliency"]:
        print(f"{row['defense']:>9} {row['goal']} {row['horizon_timeslots']} timeslots: k={row['k']} ({row['bound']})")
    return 0


def run_bench(session, args) -> int:
    from experiment_session import scalability_bench
    goals = [args.goal] if args.goal else ["uf"]
    report = scalability_bench(session, _horizons(session, args, DEFAULT_BENCH_CYCLES), _defenses(args), goals)
    _emit(report, session, args)
    for row in report.tables["scalability_fit"]:
        print(f"{row['defense']:>9} {row['goal']}: {row['slope']:.4g} s/timeslot, R^2 = {row['r2']:.3f}")
    return 0


def run_case_studies(session, args) -> int:
    from experiment_session import CASE_STUDIES, run_case_study
    case_ids = [args.case_study] if args.case_study else sorted(CASE_STUDIES)
    for case_id in case_ids:
        report = run_case_study(case_id, session)
        _emit(report, session, args)
        print(f"Case study {case_id}: {CASE_STUDIES[case_id]}")
    return 0


def run_validate(session, args) -> int:
    from experiment_session import validation_experiment
    report = validation_experiment(session)
    _emit(report, session, args)
    for row in report.tables["validation"]:
        print(f"case study {row['case_study']} bus {row['bus']}: {row['max_deviation_hz']:.4g} Hz")
    return 0


def load_verb_functions() -> None:
    """Fill VERB_FUNCTIONS on first use"""
    if VERB_FUNCTIONS:
        return
    VERB_FUNCTIONS.update({
        "simulate": run_simulate,
        "train-adm": run_train_adm,
        "attack": run_attack,
        "replay": run_replay,
        "sweep-access": run_sweep_access,
        "resiliency": run_resiliency,
        "bench": run_bench,
        "case-study": run_case_studies,
        "validate": run_validate,
    })


def scenario_overrides(args) -> Dict[str, Any]:
    """CLI values that replace scenario entries; unset flags stay None and are skipped"""
    return {
        "seed": args.seed,
        "detector": args.detector,
        "goal": args.goal,
        "access": args.access,
        "horizon": args.horizon,
    }


def main(args) -> int:
    """
    Run one verb against the scenario named on the command line

    Returns:
        Process exit code; domain errors propagate to the entry point
    """
    from experiment_session import ExperimentSession, load_scenario

    load_verb_functions()
    if args.verb not in VERB_FUNCTIONS:
        raise ScenarioError(f"unknown verb {args.verb!r}")
    scenario = load_scenario(args.scenario, scenario_overrides(args))
    logger.info("scenario %s (%s), verb %s", scenario.name, scenario.case, args.verb)
    session = ExperimentSession(scenario)
    return VERB_FUNCTIONS[args.verb](session, args)
