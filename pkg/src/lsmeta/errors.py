"""Exception hierarchy shared by every stage of the pipeline."""


class LsmError(Exception):
    """Base class for all package errors."""


class ShapeError(LsmError, ValueError):
    """Array or parameter shapes do not line up."""


class ConfigError(LsmError, ValueError):
    """Invalid configuration, missing input file, or unsatisfiable request."""


class DataError(LsmError, ValueError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    """A raster or sample file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class AlignmentError(DataError):
    """Raster bands do not share shape or georeferencing."""


class OutOfBoundsError(DataError):
    """A sample point lies outside the raster extent."""


class NoDataError(DataError):
    """A sample point falls on a nodata cell."""


class PipelineError(LsmError):
    """A pipeline stage cannot continue (e.g. no eligible tasks)."""


class DivergenceError(LsmError, FloatingPointError):
    """Training produced a non-finite loss."""
