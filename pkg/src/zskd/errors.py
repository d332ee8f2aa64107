"""Exception hierarchy shared by every zskd module."""


class ZSKDError(Exception):
    """Base class for all errors raised by zskd."""


class DimensionError(ZSKDError, ValueError):
    pass


class ParameterError(ZSKDError, ValueError):
    pass


class DomainError(ZSKDError, ValueError):
    pass


class StateError(ZSKDError, RuntimeError):
    pass


class NumericalError(ZSKDError, ArithmeticError):
    """A forward or training computation produced NaN/Inf."""


class SynthesisDivergenceError(NumericalError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite synthesis loss at step {step}")


class NonConvergenceError(ZSKDError, RuntimeError):
    pass


class ProvenanceError(ZSKDError):
    """An artifact was produced from different upstream inputs than expected."""


class ConfigError(ZSKDError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# checkpoint / container files

class FormatError(ZSKDError, ValueError):
    """Bad magic bytes or otherwise unrecognisable file."""


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# IDX parsing

class IDXError(ZSKDError, ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


class DegenerateTemplateError(DomainError):
    """A class template (final-layer weight column) has zero norm."""
