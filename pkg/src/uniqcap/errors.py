"""Exception hierarchy shared across the package."""


class UniqcapError(Exception):
    """Base class for all errors raised by uniqcap."""


class InvalidInputError(UniqcapError, ValueError):
    pass


class InvalidEmbeddingError(InvalidInputError):
    pass


class InvalidCombinationError(InvalidInputError):
    pass


class UndefinedMarginError(UniqcapError):
    """Raised when a margin is requested for a set with fewer than two clips."""


class BuildError(UniqcapError):
    def __init__(self, cell, cause):
        self.cell = cell
        i, j, k, t = cell
        super().__init__(f"oracle failed at cell (i={i}, j={j}, k={k}, t={t}): {cause}")


class FormatError(UniqcapError):
    """Raised when a CDPT/CDPE/CDPN file or its sidecar fails to load."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class GenerationError(UniqcapError):
    pass


class CaptionUnavailableError(UniqcapError):
    pass


class TrainingError(UniqcapError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
