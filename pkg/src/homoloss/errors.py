"""Exception types shared across the package."""


class HomolossError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDepth(HomolossError, ValueError):
    """A point lies behind (or on) the camera plane."""


class DegenerateConfiguration(HomolossError, ValueError):
    """Point correspondences do not determine a unique homography."""


class IllConditionedGradient(HomolossError, ArithmeticError):
    """The two smallest singular values are too close to differentiate the solve."""


class VanishingHomogeneousScale(HomolossError, ArithmeticError):
    """A point maps to (or near) the line at infinity."""


class ParseError(HomolossError, ValueError):
    """Malformed KITTI label or calibration input."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class GenerationExhausted(HomolossError, RuntimeError):
    """Rejection sampling could not place the requested boxes."""


class DivergedRun(HomolossError, ArithmeticError):
    """The optimizer produced a non-finite loss.

    The partially filled run is attached as ``run`` so callers can report it.
    """

    def __init__(self, message, run=None):
        super().__init__(message)
        self.run = run
