"""Exception types shared across the package."""


class VaderError(Exception):
    """Base class for all package errors."""


class ShapeError(VaderError, ValueError):
    def __init__(self, op: str, *dims):
        self.op = op
        self.dims = dims
        super().__init__(f"{op}: incompatible shapes {', '.join(str(d) for d in dims)}")


class NonFiniteError(VaderError, FloatingPointError):
    def __init__(self, op: str, node_id: int | None):
        self.op = op
        self.node_id = node_id
        where = f"node {node_id}" if node_id is not None else "untaped op"
        super().__init__(f"{op} produced non-finite values at {where}")


class GradientError(VaderError, RuntimeError):
    pass


class NondeterminismError(VaderError, RuntimeError):
    pass


class ConfigError(VaderError, ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class CheckpointError(VaderError, IOError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class TrainingError(VaderError, RuntimeError):
    """Divergence or failure to meet a training floor."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class CSVFormatError(VaderError, ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")
