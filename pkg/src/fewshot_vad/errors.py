"""Exception types shared across the package."""


class FewShotVADError(Exception):
    pass


class ValidationError(FewShotVADError, ValueError):
    """Bad input value: too-short video, empty pair list, single-class labels, ..."""


class StructureError(FewShotVADError, ValueError):
    """Shape or parameter-structure mismatch."""


class NumericError(FewShotVADError, ArithmeticError):
    """Non-finite loss or gradient encountered during optimisation."""

    def __init__(self, message, grad_norm=None, task_index=None, checkpoint=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.task_index = task_index
        self.checkpoint = checkpoint


class RunLockedError(FewShotVADError, RuntimeError):
    """Another process holds the output directory."""
