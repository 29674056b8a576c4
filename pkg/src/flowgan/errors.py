"""Exception types shared across modules."""


class DivergenceError(FloatingPointError):
    """A forward pass or loss became non-finite.

    ``layer`` is the index of the flow layer where it happened, when known.
    """

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)


class ConfigurationError(ValueError):
    pass
