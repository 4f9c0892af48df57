"""Exception hierarchy shared by every module."""


class ClosedLoopError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ClosedLoopError, ValueError):
    pass


class CameraInvariantError(InvalidInputError):
    pass


class ScenarioError(InvalidInputError):
    pass


class GoalError(InvalidInputError):
    pass


class ConfigError(InvalidInputError):
    pass


# -- geometry -----------------------------------------------------------------

class GeometryError(ClosedLoopError, ValueError):
    pass


class EmptyMaskError(GeometryError):
    pass


class RayMissError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class InvalidDisparityError(GeometryError):
    pass


class DepthHoleError(GeometryError):
    pass


# -- agent stages ---------------------------------------------------------------

class StageError(ClosedLoopError):
    """A pipeline stage could not produce a valid output.

    ``stage`` names the agent the failure is charged to by the recovery ladder.
    """

    stage = "none"

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class SchemaViolation(StageError):
    def __init__(self, role: str, message: str):
        super().__init__(f"{role}: schema violation: {message}", stage=role)
        self.role = role


class DecompositionError(StageError):
    stage = "decomposer"


class DescriptorError(StageError):
    stage = "descriptor"


class PerceptionMiss(StageError):
    stage = "perceptor"


class GroundingError(StageError):
    stage = "grounder"


class ProjectionError(StageError):
    stage = "projector"


class ThinkerError(StageError):
    stage = "thinker"


class ActuationError(StageError):
    stage = "actor"


# -- backends -------------------------------------------------------------------

class BackendError(ClosedLoopError):
    """Errors that abort a run instead of entering the recovery ladder."""


class BackendUnavailable(BackendError):
    pass


class FixtureMiss(BackendError):
    pass


class CassetteMiss(FixtureMiss):
    pass
