"""
Rail Rescheduling Engine - Error Types
"""


class RailSchedError(Exception):
    """Base class for every error raised by the engine."""


class ParameterError(RailSchedError, ValueError):
    """A numeric parameter is outside its admissible range."""


class RangeError(RailSchedError, ValueError):
    """A time, index or identifier falls outside the modelled horizon."""


class NetworkFileError(RailSchedError, ValueError):
    """A network, demand or experiment file could not be read."""


class InfeasibleInputError(RailSchedError, ValueError):
    """The initial condition handed to the problem builder is infeasible."""


class EncodingError(RailSchedError, ValueError):
    """Big-M constants do not cover the variable they encode."""


class EncodingBoundError(RailSchedError):
    """A solved point leaves the bracket assumed by an order encoding."""


class ConsistencyError(RailSchedError):
    """Past decisions or plant bookkeeping contradict the model."""


class SolverError(RailSchedError):
    """Numerical breakdown the solver could not recover from."""


class InfeasibleError(RailSchedError):
    """No feasible point exists for the requested solve."""


class OracleCapError(RailSchedError):
    """Enumeration oracle refused an instance above its column cap."""


class DimensionError(RailSchedError, ValueError):
    """Learning state or network layout does not match."""


class TrainingDivergedError(RailSchedError):
    """Training loss exceeded the divergence threshold."""


class PairingError(RailSchedError, ValueError):
    """Strategy runs and benchmark runs are not matched instance by instance."""


class FallbackError(RailSchedError):
    """The recursive-feasibility fallback failed to produce a feasible step."""
