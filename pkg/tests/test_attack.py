import json

import numpy as np
import pytest

from adm.adm import BddRule
from attack.attack import (
    AdversaryModel,
    AttackConfig,
    AttackVector,
    _predicted_trip,
    attack_feasible,
    build_attack_milp,
    find_min_trip_time,
    k_resiliency,
    load_attack,
    replay_attack,
    save_attack,
    scan_alarms,
    state_at_attack_start,
    truncate_attack,
)
from dynamics.dynamics import GridState, equilibrium_state, first_trip, run_horizon
from errors import MalformedCase, ModelTooLarge, VerificationMismatch
from lfc.lfc import LfcPolicy
from optimizer.optimizer import BigMConfig, SolveLimits

ATTACK_START = 1


def _adversary(network, buses=None, mode="none", max_duration=4):
    buses = network.measured_buses if buses is None else buses
    return AdversaryModel.from_buses(network, buses, attack_start=ATTACK_START,
                                     max_duration=max_duration, detector_mode=mode)


def _detector(mode):
    return BddRule(0.04) if mode == "rules_bdd" else None


@pytest.fixture(scope="module")
def start_state(case3, desk_sim, benign, initial):
    return state_at_attack_start(case3, desk_sim, initial, benign, ATTACK_START * desk_sim.lfc_period)


@pytest.fixture(scope="module")
def syntheses(case3, desk_sim, benign, initial):
    results = {}
    for mode in ("none", "rules_bdd"):
        results[mode] = find_min_trip_time(case3, desk_sim, initial, benign,
                                           _adversary(case3, mode=mode, max_duration=6),
                                           _detector(mode))
    return results


def test_unprotected_attack_trips_and_replays(case3, desk_sim, benign, initial, syntheses):
    result = syntheses["none"]
    assert result.feasible
    assert result.trip_event.kind == "UF"
    start = ATTACK_START * desk_sim.lfc_period
    assert start < result.trip_timeslot <= start + result.horizon_cycles * desk_sim.lfc_period
    assert result.timeslots_to_goal == result.trip_timeslot - start
    assert result.attack.predicted_trip_timeslot == result.trip_timeslot
    # every earlier horizon was proven infeasible
    assert [s["status"] for s in result.solves[:-1]] == ["infeasible"] * (len(result.solves) - 1)

    trajectory, report = replay_attack(result.attack, case3, desk_sim, initial, benign, None,
                                       predicted=result)
    assert report.verified
    assert abs(report.trip_timeslot - result.trip_timeslot) <= 2
    assert report.max_discrepancy <= 1e-5
    assert trajectory.relay_events[0].kind == "UF"


def test_bdd_attack_respects_step_bound(case3, desk_sim, benign, initial, syntheses):
    result = syntheses["rules_bdd"]
    assert result.feasible
    table = result.attack.injection_matrix(case3)
    steps = np.diff(np.vstack([np.zeros(case3.n_buses), table]), axis=0)
    assert np.max(np.abs(steps)) <= 0.04 + 1e-7

    _, report = replay_attack(result.attack, case3, desk_sim, initial, benign, BddRule(0.04),
                              predicted=result)
    assert report.verified
    assert report.pre_trip_alarms == 0


def test_detection_delays_the_trip(syntheses):
    # the stealthy set shrinks as detection gets stricter
    assert syntheses["none"].lfc_cycles_to_goal < syntheses["rules_bdd"].lfc_cycles_to_goal
    assert syntheses["none"].trip_timeslot < syntheses["rules_bdd"].trip_timeslot


@pytest.mark.slow
@pytest.mark.parametrize("seed", [7, 8, 9, 10, 11])
def test_clustering_detector_delays_the_trip_further(case3, desk_sim, benign, initial, syntheses,
                                                     seeded_adm, seed):
    adm = seeded_adm(seed)
    bdd = syntheses["rules_bdd"]
    # an attack shaped only by the step bound still leaves the trained clusters
    _, report = replay_attack(bdd.attack, case3, desk_sim, initial, benign, adm, verify=False)
    assert report.pre_trip_alarms >= 1

    result = find_min_trip_time(case3, desk_sim, initial, benign,
                                _adversary(case3, mode="ml_adm", max_duration=12), adm)
    if not result.feasible:
        pytest.skip(f"no stealthy attack against the seed {seed} detector within 12 cycles")
    assert syntheses["none"].lfc_cycles_to_goal < bdd.lfc_cycles_to_goal < result.lfc_cycles_to_goal
    _, report = replay_attack(result.attack, case3, desk_sim, initial, benign, adm, predicted=result)
    assert report.pre_trip_alarms == 0


@pytest.mark.slow
def test_replays_match_the_milp_across_seeded_loads(case3, desk_sim):
    rng = np.random.default_rng(20)
    matched = 0
    for _ in range(40):
        if matched == 20:
            break
        loads = case3.base_loads * rng.uniform(0.85, 1.05, case3.n_buses)
        start = equilibrium_state(case3, loads)
        mode = ("none", "rules_bdd")[matched % 2]
        result = find_min_trip_time(case3, desk_sim, start, loads,
                                    _adversary(case3, mode=mode, max_duration=6), _detector(mode))
        if not result.feasible:
            continue
        _, report = replay_attack(result.attack, case3, desk_sim, start, loads, _detector(mode),
                                  predicted=result)
        assert report.max_discrepancy <= 1e-5
        assert abs(report.trip_timeslot - result.trip_timeslot) <= 2
        matched += 1
    assert matched == 20


def test_larger_offsets_never_delay_the_trip(case3, desk_sim, benign, initial, syntheses):
    attack = syntheses["none"].attack
    trips = []
    for scale in (0.5, 1.0, 2.0):
        scaled = AttackVector(attack.start_cycle, attack.n_cycles,
                              {key: scale * value for key, value in attack.injections.items()})
        trajectory = run_horizon(case3, initial, desk_sim, benign, LfcPolicy(), scaled)
        event = first_trip(trajectory.relay_events, ("UF",))
        trips.append(np.inf if event is None else event.timeslot)
    assert np.isfinite(trips[1])
    assert trips[2] <= trips[1] <= trips[0]


def test_predicted_trip_follows_the_goal(case3):
    def state(t, omega):
        return GridState(t, np.zeros(3), np.array(omega), np.zeros(2), np.zeros(2), case3.base_loads)

    # generator bus 1 dips below 59.5 Hz before bus 2 rises above 60.5 Hz
    states = [state(0, [1.0, 1.0]), state(1, [0.99, 1.0]), state(2, [1.0, 1.01])]
    assert _predicted_trip(states, case3, case3.relay, "uf").kind == "UF"
    over = _predicted_trip(states, case3, case3.relay, "of")
    assert (over.kind, over.timeslot) == ("OF", 2)
    assert _predicted_trip(states, case3, case3.relay, "either").timeslot == 1
    assert _predicted_trip(states[:2], case3, case3.relay, "of") is None


def test_replay_ignores_trips_outside_the_goal(case3, desk_sim, benign, initial, syntheses):
    attack = syntheses["none"].attack
    as_over = AttackVector(attack.start_cycle, attack.n_cycles, dict(attack.injections), goal="of")
    trajectory, report = replay_attack(as_over, case3, desk_sim, initial, benign, None, verify=False)
    assert trajectory.relay_events[0].kind == "UF"
    assert report.trip_event is None or report.trip_event.kind == "OF"



def test_unstealthy_attack_alarms_under_bdd(case3, desk_sim, benign, initial, syntheses):
    attack = syntheses["none"].attack
    if np.max(np.abs(attack.injection_matrix(case3))) <= 0.04:
        pytest.skip("unconstrained attack happens to satisfy the step bound")
    with pytest.raises(VerificationMismatch) as info:
        replay_attack(attack, case3, desk_sim, initial, benign, BddRule(0.04))
    assert info.value.report.pre_trip_alarms > 0


@pytest.mark.slow
def test_adm_attack_is_stealthy(case3, desk_sim, benign, initial, desk_adm):
    adversary = _adversary(case3, mode="ml_adm", max_duration=12)
    result = find_min_trip_time(case3, desk_sim, initial, benign, adversary, desk_adm)
    assert result.feasible
    _, report = replay_attack(result.attack, case3, desk_sim, initial, benign, desk_adm,
                              predicted=result)
    assert report.verified
    assert report.pre_trip_alarms == 0


def test_injections_only_at_accessible_buses(case3, desk_sim, benign, start_state):
    milp = build_attack_milp(case3, desk_sim, start_state, benign, _adversary(case3, [3]), None,
                             None, horizon_cycles=2)
    assert [sorted(inj) for inj in milp.injections] == [[3], [3]]
    assert len(milp.states) == 2 * desk_sim.lfc_period
    assert milp.start_timeslot == ATTACK_START * desk_sim.lfc_period


def test_omega_injection_columns(case3, desk_sim, benign, start_state):
    config = AttackConfig(omega_injection=True)
    milp = build_attack_milp(case3, desk_sim, start_state, benign, _adversary(case3, [2, 3]), None,
                             None, horizon_cycles=1, config=config)
    assert sorted(milp.omega_injections[0]) == [2]


def test_build_checks_its_inputs(case3, desk_sim, benign, initial, start_state):
    adversary = _adversary(case3)
    with pytest.raises(ValueError):
        build_attack_milp(case3, desk_sim, initial, benign, adversary, None, None, 1)
    with pytest.raises(ValueError):
        build_attack_milp(case3, desk_sim, start_state, benign, adversary, None, None, 5)
    with pytest.raises(ValueError):
        build_attack_milp(case3, desk_sim, start_state, benign, _adversary(case3, mode="ml_adm"),
                          BddRule(0.04), None, 1)
    with pytest.raises(ModelTooLarge):
        build_attack_milp(case3, desk_sim, start_state, benign, adversary, None, None, 2,
                          config=AttackConfig(max_variables=100))


def test_no_access_means_no_attack(case3, desk_sim, benign, initial):
    result = find_min_trip_time(case3, desk_sim, initial, benign, _adversary(case3, [], max_duration=2), None)
    assert not result.feasible
    assert result.trip_timeslot is None
    assert result.timeslots_to_goal is None
    assert len(result.solves) == 2


def test_feasibility_check(case3, desk_sim, benign, start_state):
    args = (case3, desk_sim, start_state, benign)
    tail = (case3.relay, 3, "uf", AttackConfig(), SolveLimits(), BigMConfig())
    assert attack_feasible(*args, _adversary(case3), None, *tail)
    assert not attack_feasible(*args, _adversary(case3, []), None, *tail)


def test_small_injections_leave_every_subset_harmless(case3, desk_sim, benign, initial):
    result = k_resiliency(case3, desk_sim, initial, benign, _adversary(case3), None, horizon_cycles=2,
                          config=AttackConfig(injection_bound=0.02))
    assert result.k == 3
    assert result.never_feasible
    assert result.label == "N/A"
    assert result.bound == "exact"


def test_resiliency_against_unprotected_loop(case3, desk_sim, benign, initial):
    result = k_resiliency(case3, desk_sim, initial, benign, _adversary(case3), None, horizon_cycles=3)
    assert not result.never_feasible
    assert 0 <= result.k < 3
    assert result.label == str(result.k)


def test_truncation_keeps_leading_cycles(case3, desk_sim, benign, initial, syntheses):
    attack = syntheses["rules_bdd"].attack
    if attack.n_cycles < 2:
        pytest.skip("attack too short to cut")
    short = truncate_attack(attack, 1)
    assert short.n_cycles == 1
    assert {c for _, c in short.injections} == {attack.start_cycle}
    assert short.predicted_trip_timeslot is None
    with pytest.raises(ValueError):
        truncate_attack(attack, 0)


def test_attack_file_round_trip(tmp_path):
    attack = AttackVector(2, 2, {(3, 2): -0.04, (3, 3): -0.08, (1, 2): 0.01}, detector_mode="rules_bdd",
                          goal="uf", predicted_trip_timeslot=71)
    path = str(tmp_path / "attack.json")
    save_attack(attack, path)
    data = json.load(open(path))
    assert [e["cycle"] for e in data["injections"]] == [2, 2, 3]
    again = load_attack(path)
    assert again.injections == attack.injections
    assert again.predicted_trip_timeslot == 71
    assert again.end_cycle == 4

    (tmp_path / "bad.json").write_text(json.dumps({"injections": [{"bus": 1}]}))
    with pytest.raises(MalformedCase):
        load_attack(str(tmp_path / "bad.json"))


def test_attack_vector_offsets(case3):
    attack = AttackVector(1, 2, {(3, 1): -0.1, (3, 2): -0.2})
    np.testing.assert_allclose(attack.load_offsets(2, case3), [0.0, 0.0, -0.2])
    assert attack.load_offsets(3, case3) is None
    assert attack.omega_offsets(1, case3) is None
    np.testing.assert_allclose(attack.attacked_measurements(case3.base_loads, case3)[:, 2], [0.8, 0.7])


def test_adversary_model(case3, case39):
    with pytest.raises(ValueError):
        AdversaryModel.from_buses(case3, [4])
    with pytest.raises(ValueError):
        AdversaryModel((True,) * 3, max_duration=0)
    with pytest.raises(ValueError):
        AdversaryModel((True,) * 3, detector_mode="ids")
    adversary = AdversaryModel.from_buses(case39, case39.bus_ids)
    assert adversary.attackable_buses(case39) == case39.measured_buses
    with pytest.raises(ValueError):
        adversary.accessible_buses(case3)


def test_benign_run_raises_no_alarms(case3, desk_sim, benign, initial, desk_adm):
    trajectory = run_horizon(case3, initial, desk_sim, benign, LfcPolicy())
    assert scan_alarms(trajectory.dispatch, case3, BddRule(0.04)) == []
    assert scan_alarms(trajectory.dispatch, case3, desk_adm) == []
    assert scan_alarms(trajectory.dispatch, case3, None) == []
