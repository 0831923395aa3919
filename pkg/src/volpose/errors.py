"""Exception types raised across the package."""


class VolPoseError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(VolPoseError, ValueError):
    pass


class NonPositiveDepth(VolPoseError, ValueError):
    pass


class DegenerateInput(VolPoseError, ValueError):
    pass


class DegenerateConfiguration(VolPoseError, ValueError):
    pass


class ZeroLengthPart(VolPoseError, ValueError):
    pass


class ConfigError(VolPoseError, ValueError):
    pass


class NonFiniteLoss(VolPoseError, RuntimeError):
    pass
