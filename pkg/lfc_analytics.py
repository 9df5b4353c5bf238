#!/usr/bin/env python3

import argparse
import os
import sys
from typing import List, Optional

# Get the directory where the script is located
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))

DEFAULT_SCENARIO = os.path.join(SCRIPT_DIR, "scenarios", "desk3.json")

EXIT_ERROR = 1
EXIT_MISMATCH = 3


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    # Add script directory to Python path to ensure modules can be found
    if SCRIPT_DIR not in sys.path:
        sys.path.insert(0, SCRIPT_DIR)
    from wrapper import VERBS

    parser = argparse.ArgumentParser(
        description="Stealthy false-data-injection attack analytics for load frequency control",
        epilog="\n".join(f"  {verb:<13} {text}" for verb, text in VERBS.items()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("verb", choices=list(VERBS), help="What to run")
    parser.add_argument("--scenario", default=DEFAULT_SCENARIO, help="Scenario JSON file")
    parser.add_argument("--out", help="Output directory (default: the scenario's output_dir)")
    parser.add_argument("--seed", type=int, help="Seed for synthetic loads and sampled subsets")
    parser.add_argument("--detector", choices=["none", "bdd", "adm"], help="Detector the attacker must evade")
    parser.add_argument("--goal", choices=["uf", "of", "either"], help="Relay the attack must trip")
    parser.add_argument("--access", help="Accessible buses: 'all', a count k or a bus list like '1,3'")
    parser.add_argument("--horizon", type=int, help="Maximum attack duration in LFC cycles")
    parser.add_argument("--attack-file", help="Attack vector JSON for the replay verb")
    parser.add_argument("--case-study", type=int, choices=[1, 2, 3, 4], help="Run a single case study")
    parser.add_argument("--k-values", type=_int_list, help="Accessibility sweep sizes, e.g. 1,2,3")
    parser.add_argument("--horizons", type=_int_list, help="Horizons in timeslots for resiliency and bench")
    parser.add_argument("--debug", action="store_true", help="Enable debug mode with verbose output")
    parser.add_argument("--config", type=str, help="Path to a custom settings file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the LFC attack-analytics toolkit
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    # Set debug flag for other modules
    if args.debug:
        os.environ["LFC_DEBUG"] = "1"

    # Set custom config file if specified
    if args.config:
        os.environ["LFC_CONFIG"] = args.config

    from errors import LfcAnalyticsError, VerificationMismatch
    from utils.log import configure_logging
    configure_logging()

    try:
        from wrapper import main as wrapper_main
        return wrapper_main(args)
    except KeyboardInterrupt:
        print("Program terminated by user.")
        return EXIT_ERROR
    except VerificationMismatch as e:
        print(f"Verification failed: {e}")
        if e.report is not None:
            print(f"  replayed trip t={e.report.trip_timeslot}, predicted t={e.report.predicted_trip_timeslot}, "
                  f"pre-trip alarms {e.report.pre_trip_alarms}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return EXIT_MISMATCH
    except LfcAnalyticsError as e:
        print(f"An error occurred: {e}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
