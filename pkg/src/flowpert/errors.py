"""Exception types raised by the estimators and the sampler."""


class NumericalFailure(FloatingPointError):
    """A flow step or estimator produced non-finite values.

    ``step`` carries the generative step index when known.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class SingularJacobian(NumericalFailure):
    """A (pulled-back) perturbation collapsed to zero norm."""


class DegenerateEnsemble(RuntimeError):
    """All particle weights underflowed after normalization."""

    def __init__(self, message, level=None, diagnostics=None):
        if level is not None:
            message = f"{message} (level {level})"
        super().__init__(message)
        self.level = level
        self.diagnostics = diagnostics
