"""Exception hierarchy. The CLI maps these onto exit codes."""


class PlanVMRError(Exception):
    """Base class for all package errors."""


class DataError(PlanVMRError):
    """Invalid or missing input data (CLI exit code 2)."""


class InvariantError(DataError, ValueError):
    """A domain invariant was violated."""


class CorpusParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class ShapeError(DataError, ValueError):
    pass


class DegenerateInputError(PlanVMRError, ValueError):
    """Input for which the quantity is undefined, e.g. a zero vector in a cosine."""


class NumericalError(PlanVMRError):
    """Non-finite values or divergence (CLI exit code 3)."""


class DivergenceError(NumericalError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class GenerationError(PlanVMRError):
    """The text-generation backend failed or returned malformed output."""


class StageError(PlanVMRError):
    """A dataset build stage failed; wraps the original exception."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
