"""Exception types raised across ticketlab."""

from typing import Optional


class LabError(Exception):
    """Base class for every error raised by ticketlab."""


class ConfigurationError(LabError, ValueError):
    """A model, training, pruning or experiment configuration is invalid."""


class CongruenceError(LabError, ValueError):
    """Two param sets, masks or optimizer states do not line up entry-by-entry."""


class DomainError(LabError, ValueError):
    """An analysis was requested outside the range where it is defined."""


class NumericFailure(LabError, ArithmeticError):
    """A loss or weight became NaN/Inf during training.

    The training context (epoch, batch and, for mask generation, the pruning
    round or ADMM outer iteration) is kept on the exception and rendered in
    the message.
    """

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        prune_round: Optional[int] = None,
        outer_iter: Optional[int] = None,
    ):
        self.detail = message
        self.epoch = epoch
        self.batch = batch
        self.prune_round = prune_round
        self.outer_iter = outer_iter
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        for key in ("prune_round", "outer_iter", "epoch", "batch"):
            value = getattr(self, key)
            if value is not None:
                where.append(f"{key}={value}")
        if not where:
            return self.detail
        return f"{self.detail} ({', '.join(where)})"

    def at(self, **context) -> "NumericFailure":
        """Return a copy of this failure with extra context filled in."""
        fields = {
            "epoch": self.epoch,
            "batch": self.batch,
            "prune_round": self.prune_round,
            "outer_iter": self.outer_iter,
        }
        fields.update({k: v for k, v in context.items() if v is not None})
        return NumericFailure(self.detail, **fields)


class MaskInvariantError(LabError, AssertionError):
    """Weights became nonzero outside the support of a fixed mask."""

    def __init__(self, violation, epoch: Optional[int] = None):
        self.violation = violation
        self.epoch = epoch
        where = f" after epoch {epoch}" if epoch is not None else ""
        super().__init__(f"mask invariant violated{where}: {violation}")


class DependencyError(LabError, FileNotFoundError):
    """A stage needs a checkpoint that an earlier stage has not produced."""

    def __init__(self, path, stage: str):
        self.path = str(path)
        self.stage = stage
        super().__init__(f"missing {self.path}; run the `{stage}` stage first")


class IdxError(LabError, ValueError):
    """An IDX file could not be parsed."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class CheckpointError(LabError, ValueError):
    """A checkpoint file could not be read back."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class PrecisionMismatchError(CheckpointError):
    pass
