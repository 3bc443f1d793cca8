"""Exception types shared across the package."""


class HplError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(HplError, ValueError):
    """An interface contract was violated by the caller (bad shapes, ranges, sizes)."""


class DomainError(HplError, ValueError):
    """Numerically degenerate input, e.g. a zero-norm vector where a direction is needed."""


class TrainingError(HplError, RuntimeError):
    """Training cannot continue (non-finite loss or gradients)."""


class DataFormatError(HplError, ValueError):
    """A dataset file is malformed; the message names the offending line."""


class CheckpointError(HplError, RuntimeError):
    """A checkpoint file is corrupt or otherwise unreadable."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written with an unsupported format version."""
