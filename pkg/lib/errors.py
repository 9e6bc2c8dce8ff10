"""Exception hierarchy shared by every DESP module."""
from typing import Optional


class DespError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DespError, ValueError):
    """Tensor shapes do not fit the requested operation."""


class ContractError(DespError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(DespError, ValueError):
    """Invalid configuration file content or environment variable."""


class CheckpointError(DespError, ValueError):
    """Checkpoint file is malformed or does not match its descriptor."""


class UndefinedAngleError(DespError, ValueError):
    """Rotation cannot be estimated from a degenerate vertex set."""


class SamplerDivergenceError(DespError, RuntimeError):
    """Langevin chain produced a non-finite gradient."""

    def __init__(self, step: int, batch_index: Optional[int] = None):
        self.step = step
        self.batch_index = batch_index
        where = f" (batch {batch_index})" if batch_index is not None else ""
        super().__init__(f"sampler diverged at step {step}{where}: non-finite energy gradient")

    def with_batch(self, batch_index: int) -> "SamplerDivergenceError":
        return SamplerDivergenceError(self.step, batch_index)


class TrainingDivergedError(DespError, RuntimeError):
    """Training loss became non-finite; the last good checkpoint is kept."""

    def __init__(self, epoch: int, batch_index: int, last_checkpoint: Optional[str] = None):
        self.epoch = epoch
        self.batch_index = batch_index
        self.last_checkpoint = last_checkpoint
        kept = last_checkpoint or "none written"
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; last good checkpoint: {kept}"
        )
