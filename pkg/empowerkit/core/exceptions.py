"""
Empowerkit - Exceptions

Errors raised by the numerical core. Management commands map them onto
exit codes: configuration and checkpoint problems exit 2, everything else 1.
"""


class EmpowerkitError(Exception):
    """Base class for every error raised by the core app."""


class ContractViolation(EmpowerkitError, ValueError):
    """An argument breaks a documented precondition (shape, range, finiteness)."""


class NonFiniteActivation(EmpowerkitError, FloatingPointError):
    """A forward or backward pass produced NaN or inf."""

    def __init__(self, layer_index, stage='forward'):
        self.layer_index = layer_index
        self.stage = stage
        super().__init__(f"non-finite values in layer {layer_index} during {stage} pass")


class EstimatorDivergence(EmpowerkitError):
    """Held-out bound became non-finite while training an estimator."""

    def __init__(self, kind, epoch, curve):
        self.kind = kind
        self.epoch = epoch
        self.curve = list(curve)
        super().__init__(
            f"{kind} estimator diverged at epoch {epoch}; held-out curve so far: {self.curve}"
        )


class TrainingAborted(EmpowerkitError):
    """A training component gave up; parameters were restored where possible."""


class CheckpointError(EmpowerkitError):
    """A checkpoint is unreadable or does not match the requested shapes."""


class ConfigError(EmpowerkitError):
    """A run configuration has unknown keys or invalid values."""
