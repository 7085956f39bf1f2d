class ConfigError(ValueError):
    """Invalid sizes, hyperparameters or configuration sections."""


class DimensionError(ValueError):
    """An input's shape does not match the network or operator it is used with."""


class StreamExhausted(RuntimeError):
    """The sample stream ran out before the requested number of iterations."""


class NonFiniteError(FloatingPointError):
    """A payoff or gradient became NaN/inf during training."""

    def __init__(self, iteration: int, what: str = "gradient"):
        self.iteration = iteration
        super().__init__(
            f"non-finite {what} at iteration {iteration}; check stepsize and data scale"
        )
