"""Exception hierarchy shared across the package."""


class MTAdaptError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MTAdaptError, ValueError):
    """Invalid scene, dataset, model or experiment configuration."""


class ModelConstructionError(MTAdaptError, ValueError):
    """Parameter or input shapes do not match the architecture."""


class PromptError(MTAdaptError, ValueError):
    """Malformed prompt template or an over-long token sequence."""


class TrainingAbortError(MTAdaptError, RuntimeError):
    """A non-finite loss was produced during optimization."""


class InvariantViolationError(MTAdaptError, RuntimeError):
    """A runtime invariant (for example frozen-tensor integrity) was broken."""


class CorruptCheckpointError(MTAdaptError, IOError):
    """Checkpoint payload does not match its manifest."""
