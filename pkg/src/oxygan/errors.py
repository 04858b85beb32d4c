"""Exception hierarchy shared by every oxygan module."""


class OxyganError(Exception):
    """Base class; the CLI maps subclasses to an error category."""

    category = "error"


class ShapeError(OxyganError, ValueError):
    category = "shape"

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ConfigError(OxyganError, ValueError):
    category = "config"


class ParameterError(OxyganError, ValueError):
    category = "parameter"


class GeometryError(OxyganError, ValueError):
    category = "geometry"


class DegenerateVarianceError(OxyganError, ValueError):
    category = "degenerate"


class ContractError(OxyganError, RuntimeError):
    category = "contract"


class FormatError(OxyganError, ValueError):
    category = "format"
