"""Exception hierarchy. CLI exit codes map DataError -> 2, ModelError -> 3."""


class ImlkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(ImlkitError):
    """Invalid input data: bad shapes, ranges, files, or manifest schema."""


class ModelError(ImlkitError):
    """Model-side failure: bad config, failed forward, missing weights."""


class BackendError(ModelError):
    """Unknown backend id or a backend that cannot be constructed/loaded."""


class UntrainedModelError(ModelError):
    """A model that requires training was used before being trained."""


class TrainingDiverged(ModelError):
    """Loss became non-finite during training."""


class JitterSkip(ImlkitError):
    """Signal: no valid object available, the sample must be skipped."""
