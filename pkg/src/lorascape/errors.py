"""Shared exception types."""


class LorascapeError(Exception):
    pass


class ConfigError(LorascapeError):
    """Invalid configuration value or unknown config key."""


class CapacityError(LorascapeError):
    """A requested problem size exceeded a configured cap."""


class FormatError(LorascapeError):
    """On-disk operator/instance data is inconsistent or unreadable."""


class RankDeficientError(LorascapeError):
    """A point expected to have numerical rank r has rank s < r.

    Carries the effective rank so callers can route to the
    rank-deficient (nuclear-certificate) analysis path.
    """

    def __init__(self, effective_rank: int, singular_values=None):
        self.effective_rank = effective_rank
        self.singular_values = singular_values
        super().__init__(f"numerical rank {effective_rank} below requested rank")


class InfeasibleRankError(LorascapeError):
    """No rank satisfies the capacity condition; carries the maximal capacity."""

    def __init__(self, max_capacity: int, required: float):
        self.max_capacity = max_capacity
        self.required = required
        super().__init__(
            f"max capacity {max_capacity} cannot exceed required {required:g}"
        )


class UndefinedEstimateError(LorascapeError):
    """An estimator has no valid input pairs (e.g. all denominators underflow)."""


class NotConvergedError(LorascapeError):
    """Training diverged; carries a diagnostic message."""
