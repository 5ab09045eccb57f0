class ConfigError(ValueError):
    """Invalid configuration value. ``key`` names the offending field when known."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
