"""Exception types shared across the package."""


class EvosynthError(Exception):
    """Base class for every error raised by this library."""


class ConfigurationError(EvosynthError):
    """A configuration value is invalid (bad normalizer, bad hyperparameter,
    malformed run configuration). The message lists every violation found."""


class ShapeError(EvosynthError):
    """An input was rejected because its shape does not match the network."""


class NumericOverflowError(EvosynthError):
    """A forward or backward pass produced a non-finite intermediate value."""


class TrainingDivergedError(EvosynthError):
    """Training loss became non-finite. `epoch` is the 1-based epoch where it happened."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch} (non-finite loss)")
        self.epoch = epoch


class GenomeParseError(EvosynthError):
    """A genome file is malformed. `offset` is the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenomeMagicError(GenomeParseError):
    pass


class GenomeVersionError(GenomeParseError):
    pass


class GenomeTruncatedError(GenomeParseError):
    def __init__(self, expected: int, actual: int, offset: int):
        super().__init__(
            f"genome file truncated: expected {expected} bytes, got {actual}", offset
        )
        self.expected = expected
        self.actual = actual


class GenomeChecksumError(GenomeParseError):
    pass


class DatasetError(EvosynthError):
    """A dataset could not be loaded or constructed."""


class IdxMagicError(DatasetError):
    pass


class IdxDimensionError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    def __init__(self, path: str, expected: int, actual: int):
        super().__init__(f"{path}: truncated, expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class SynthesisFailedError(EvosynthError):
    """Strict budget enforcement exhausted its resampling attempts.
    `best` carries the lowest-ratio attempt seen."""

    def __init__(self, attempts: int, best):
        super().__init__(
            f"synthesis failed: {attempts} attempts all exceeded the budget "
            f"(best realized ratio {best.realized_ratio:.6f})"
        )
        self.attempts = attempts
        self.best = best


class DegenerateOffspringError(EvosynthError):
    """Sampling produced an offspring with no live synapses at all."""


class UndefinedRatioError(EvosynthError):
    """A synapse-count ratio against a parent with zero live synapses."""


class EfficiencyUndefinedError(EvosynthError):
    """An efficiency ratio against a descendant with zero live synapses."""


class ResumeError(EvosynthError):
    """A persisted run could not be resumed. `generation` names the record
    that could not be restored, when one is identifiable."""

    def __init__(self, message: str, generation: int | None = None):
        super().__init__(message)
        self.generation = generation


class RunLockedError(EvosynthError):
    """Another process holds the run-directory lock."""
