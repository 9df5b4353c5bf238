#!/usr/bin/env python3

"""
Exception hierarchy for the LFC attack-analytics toolkit.

Every error raised on purpose by the packages derives from LfcAnalyticsError so
the command-line entry point can map them to exit codes in one place.
"""


class LfcAnalyticsError(Exception):
    """Root of all toolkit errors"""


# grid_model
class MalformedCase(LfcAnalyticsError):
    """Case file does not follow the case schema"""


class InconsistentCase(LfcAnalyticsError):
    """Case file parses but violates a network invariant"""


# dynamics
class SingularStep(LfcAnalyticsError):
    """The implicit step (or a DC power-flow solve) has a singular matrix"""


class HorizonNotCovered(LfcAnalyticsError):
    """Load source is shorter than the requested horizon"""


# adm
class InsufficientData(LfcAnalyticsError):
    """Series too short to form DBSCAN windows"""


class AllNoise(LfcAnalyticsError):
    """DBSCAN found no core point"""


class DegenerateCluster(LfcAnalyticsError):
    """Cluster has no full-dimensional hull and thickening is disabled"""


# optimizer
class BigMTooSmall(LfcAnalyticsError):
    """The big-M constant cannot relax the indicator row over the declared bounds"""


class MissingBounds(LfcAnalyticsError):
    """A continuous variable lacks the finite bounds branch-and-bound requires"""


class SolverError(LfcAnalyticsError):
    """The LP backend stopped for a reason other than optimal/infeasible/unbounded"""


# attack
class ModelTooLarge(LfcAnalyticsError):
    """Attack MILP would exceed the configured variable cap"""


class VerificationMismatch(LfcAnalyticsError):
    """Replay of a synthesized attack disagrees with the MILP prediction"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class CombinatorialBudgetExceeded(LfcAnalyticsError):
    """Subset search for k-resiliency would exceed the configured budget"""


# ingest
class MalformedRow(LfcAnalyticsError):
    """Input CSV row cannot be parsed or holds an invalid value"""


class UnknownBus(LfcAnalyticsError):
    """Input CSV refers to a bus the network does not have"""


class GapTooWide(LfcAnalyticsError):
    """Not enough observed points around a gap to fit the imputation curve"""


# harness
class ScenarioError(LfcAnalyticsError):
    """Scenario file references something that does not resolve"""
