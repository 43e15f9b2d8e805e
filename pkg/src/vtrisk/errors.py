"""Exception hierarchy. The CLI maps the three top-level families to exit codes."""


class VTRiskError(Exception):
    pass


class ConfigError(VTRiskError):
    """Bad configuration (exit code 2)."""


class InputDataError(VTRiskError):
    """Malformed or inconsistent input data (exit code 3)."""


class StageError(VTRiskError):
    """A pipeline stage could not complete (exit code 4)."""


# voxel_model
class MissingFile(InputDataError):
    pass


class DimensionMismatch(InputDataError):
    pass


class IllegalLabelByte(InputDataError):
    pass


class NonUnitFiber(InputDataError):
    pass


class IoFailure(StageError):
    pass


class ScarDoesNotFit(ConfigError):
    pass


# anatomy
class NoWallFound(InputDataError):
    pass


class DegenerateFrame(StageError):
    pass


class AxisUndefined(InputDataError):
    pass


# restitution / engine
class NotExcitable(VTRiskError, ValueError):
    pass


class PacingSiteNonExcitable(VTRiskError):
    pass


# protocol
class EmptyRange(ConfigError):
    pass


class ScheduleExceedsHorizon(ConfigError):
    pass


# analysis
class NoExitFound(VTRiskError):
    pass


# risk
class NoEffectiveSimulations(VTRiskError, ValueError):
    pass


class NoIntersection(VTRiskError):
    pass


class DegenerateSamples(NoIntersection):
    pass


# cli
class ConfigParseError(ConfigError):
    pass


class RowParseError(InputDataError):
    pass
