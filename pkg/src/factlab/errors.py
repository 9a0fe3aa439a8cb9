"""Exception types shared across the lab."""


class FactlabError(Exception):
    """Base for all errors raised by this package."""


class ConfigurationError(FactlabError):
    """Invalid schema, model config, or experiment spec."""


class RangeError(FactlabError, ValueError):
    """Argument outside its documented range."""


class UnsupportedAttributeError(FactlabError):
    """Attribute lacks the capability the operation needs (reverse template, numeric values)."""


class AmbiguityError(FactlabError):
    """Reverse derivation hit values shared by several keys."""

    def __init__(self, msg: str, collisions=None):
        super().__init__(msg)
        self.collisions = collisions or []


class DegenerateInputError(FactlabError):
    """Empty dataset or batch with nothing to learn or score."""


class ContaminationError(FactlabError):
    """Held-out keys overlap the training keys."""


class DivergenceError(FactlabError):
    """Training produced a non-finite loss."""

    def __init__(self, msg: str, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


class SearchFailureError(FactlabError):
    """Capacity search exhausted its probe budget without bracketing the band."""

    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class FitFailureError(FactlabError):
    """Nonlinear fit failed to converge."""

    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class ArityError(FactlabError):
    """Too few points for the requested fit."""


class DomainError(FactlabError):
    """Point values outside the law's domain (e.g. non-positive loss for a log-log fit)."""


class UnreachableTargetError(FactlabError):
    """Inverting a law for a value it can never reach."""
