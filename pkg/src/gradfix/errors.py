"""Exception hierarchy shared by every gradfix module."""


class GradFixError(Exception):
    """Base class for all toolkit errors."""


class CongruenceError(GradFixError, ValueError):
    """Two segmented vectors do not share names, shapes and order."""


class NumericError(GradFixError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"training diverged at step {step} (loss={value!r})")


class EmptyDatasetError(GradFixError, ValueError):
    pass


class DeficientClassError(GradFixError, ValueError):
    """A class has fewer samples than the requested per-class budget."""

    def __init__(self, budget, deficient):
        self.budget = budget
        self.deficient = dict(deficient)
        listing = ", ".join(f"class {c}: {n}" for c, n in sorted(self.deficient.items()))
        super().__init__(f"budget b={budget} exceeds class size ({listing})")


class CheckpointFormatError(GradFixError, ValueError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class ChecksumError(CheckpointFormatError):
    pass


class DatasetFormatError(GradFixError, ValueError):
    pass


class ConfigError(GradFixError, ValueError):
    pass


class StageError(GradFixError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
