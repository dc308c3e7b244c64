"""Exception hierarchy shared by every stage of the pipeline."""


class CetError(Exception):
    """Base class. ``stage`` labels which pipeline stage raised it."""

    stage = None

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ConfigurationError(CetError, ValueError):
    pass


class NumericalError(CetError, FloatingPointError):
    def __init__(self, message, layer=None, stage=None):
        super().__init__(message, stage=stage)
        self.layer = layer


class ContractViolation(CetError, ValueError):
    pass


class SpectralBreakdown(CetError):
    pass


class InfeasibleTarget(CetError):
    pass


class NoConstraintError(CetError):
    pass


class OracleRefused(CetError):
    """An oracle was asked to run beyond its size cap."""
