"""Exception hierarchy shared by every waveformer module."""


class WaveFormerError(Exception):
    """Base class for all library errors."""


class DimensionError(WaveFormerError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(WaveFormerError, ValueError):
    """A scalar hyperparameter is outside its legal range."""


class ConfigError(WaveFormerError, ValueError):
    """An architecture or run configuration is inconsistent."""


class ContractError(WaveFormerError, RuntimeError):
    """An API precondition was violated by the caller."""


class InputError(WaveFormerError, ValueError):
    """Input data is empty, malformed or out of range."""


class ParseError(InputError):
    """A data file could not be parsed.

    ``line`` is the 1-based line number in the source file (the header is
    line 1), or ``None`` when the error is not tied to a single line.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteError(WaveFormerError, FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""

    def __init__(self, op: str, tensor_name: str | None = None):
        self.op = op
        self.tensor_name = tensor_name
        where = f" ({tensor_name})" if tensor_name else ""
        super().__init__(f"non-finite values produced by op '{op}'{where}")


class DivergenceError(WaveFormerError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(message)


class CheckpointError(WaveFormerError, ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class ShapeMismatchError(CheckpointError):
    """A checkpoint tensor does not match the shape its config implies."""

    def __init__(self, name: str, expected: tuple, found: tuple):
        self.name = name
        super().__init__(
            f"tensor '{name}' has shape {found}, config expects {expected}"
        )
