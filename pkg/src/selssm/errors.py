"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid argument, shape mismatch or out-of-domain constant."""


class DataError(ValueError):
    """Bad dataset content (unknown token, out-of-range id)."""


class ParseError(DataError):
    def __init__(self, message, position=None, line=None):
        where = []
        if position is not None:
            where.append(f"position {position}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.position = position
        self.line = line


class NumericError(ArithmeticError):
    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class ScanOverflowError(NumericError):
    """Raised when the recurrent state stops being finite."""

    def __init__(self, timestep):
        super().__init__(f"non-finite state at timestep {timestep}")
        self.timestep = timestep


class GenerationError(RuntimeError):
    pass
