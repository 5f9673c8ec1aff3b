from __future__ import annotations


class RcrnError(Exception):
    """Base class for every error raised by the rcrn package."""


class DimensionError(RcrnError, ValueError):
    pass


class ContractError(RcrnError, RuntimeError):
    pass


class InputError(RcrnError, ValueError):
    pass


class FormatError(RcrnError, ValueError):
    pass


class ConfigError(RcrnError, ValueError):
    pass


class NumericalError(RcrnError, ArithmeticError):
    pass
