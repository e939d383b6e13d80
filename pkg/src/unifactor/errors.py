"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InputError(ValueError):
    """Malformed model input, e.g. a token outside the joint vocabulary."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """Non-finite or degenerate numeric input."""


class InvariantViolation(RuntimeError):
    """A training-time invariant (freeze, stop-gradient) was broken."""


class CheckpointError(OSError):
    """Unreadable, truncated or incompatible checkpoint file."""

    def __init__(self, field: str, message: str):
        super().__init__(f"checkpoint {field}: {message}")
        self.field = field


class TrainingDiverged(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"non-finite loss at step {report.get('step')}: {report}")
        self.report = report
