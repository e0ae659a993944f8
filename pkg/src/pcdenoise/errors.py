"""Exception types shared across the package."""


class PointCloudError(Exception):
    """Base class for all errors raised by pcdenoise."""


class InvalidInput(PointCloudError, ValueError):
    """An argument violates a documented precondition."""


class CoverageError(PointCloudError):
    """A point index is not covered by any patch."""


class NumericalError(PointCloudError, ArithmeticError):
    """A computation produced a non-finite or otherwise invalid value."""


class ShapeError(PointCloudError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class Unsupported(PointCloudError, NotImplementedError):
    """The requested variant has no implementation."""


class ParseError(PointCloudError, ValueError):
    """A point cloud or config file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        super().__init__(where + message)
