"""Exception types shared across the library."""


class FlowclError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(FlowclError):
    """Operands are not shape-compatible for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteValue(FlowclError):
    """A computation produced NaN or infinity where a finite value is required."""

    def __init__(self, context: str):
        super().__init__(context)


class CheckpointError(FlowclError):
    """Parameter checkpoint file is missing, corrupt, or incompatible."""


class ConfigError(FlowclError):
    """Experiment configuration is invalid; message carries the key path."""

    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"config error at '{path}': {detail}")


class SamplerError(FlowclError):
    """MCMC sampler failed a health check (e.g. acceptance collapsed)."""
