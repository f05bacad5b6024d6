"""Exception hierarchy shared by all modules."""


class TlcError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(TlcError, ValueError):
    """Shapes or arguments do not satisfy an operation's preconditions."""


class DegenerateGeometryError(TlcError, ValueError):
    """Collinear points make an angle or torsion undefined."""


class SimulationDiverged(TlcError, FloatingPointError):
    """Non-finite forces or coordinates during integration."""

    def __init__(self, message, step=None, bias=None):
        super().__init__(message)
        self.step = step
        self.bias = bias


class EmptyDatasetError(TlcError, ValueError):
    pass


class IllConditionedError(TlcError, ArithmeticError):
    pass


class DegenerateEncoderError(TlcError, ValueError):
    """CV is constant (or a linear direction vanishes) on the data."""


class TrainingDiverged(TlcError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class GenerationDiverged(TlcError, FloatingPointError):
    pass


class ConfigError(TlcError, ValueError):
    """Invalid run configuration; carries the offending key and line when known."""

    def __init__(self, message, key=None, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line


class ChecksumMismatch(TlcError):
    pass
