"""Exceptions raised by vulcan."""


class VulcanError(Exception):
    """Base class for all vulcan errors."""


class ConfigError(VulcanError, ValueError):
    """Invalid configuration or parameter value."""


class SceneFormatError(ConfigError):
    """A scene or fire config file could not be parsed."""


class SceneValidationError(ConfigError):
    """A scene violates one of its invariants."""


class GeometryError(VulcanError, ValueError):
    """A position, pose or image does not fit the world it refers to."""


class PlanningError(VulcanError):
    """Path planning could not produce a result."""


class UnreachableError(PlanningError):
    """The start or every goal lies outside traversable space."""


class StagnationError(PlanningError):
    """Gradient descent stopped making progress."""


class ResponseError(VulcanError):
    """A planner response could not be turned into an assignment."""


class MalformedResponse(ResponseError):
    """No JSON object could be extracted from the response."""


class UnknownRobot(ResponseError):
    """The response names a robot that is not part of the team."""


class MissingRobot(ResponseError):
    """The response leaves an alive robot without a goal."""


class UnknownFrontier(ResponseError):
    """The response assigns a frontier id that does not exist."""


class InvalidGoal(ResponseError):
    """The response assigns something that is not a frontier id."""


class BackendError(VulcanError):
    """The planning backend could not be reached or timed out."""


class TraceError(VulcanError, ValueError):
    """A trace, results directory or manifest is malformed."""
