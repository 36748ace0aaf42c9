"""Exception types shared across the package.

Two failure families are distinguished so the CLI can map them to stable
exit codes: caller mistakes (bad arguments, mismatched shapes, malformed
config) raise :class:`UsageError`; bad numbers in otherwise well-formed
calls (NaN/Inf, out-of-range values, divergence) raise :class:`DomainError`.
"""


class UsageError(ValueError):
    """The call itself is wrong: bad argument, shape mismatch, bad config."""


class DomainError(ValueError):
    """The values are wrong: non-finite data, out-of-range inputs, divergence."""


class TrainingDiverged(DomainError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
