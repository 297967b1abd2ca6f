"""Exception hierarchy shared by every module."""


class GuidedSegError(Exception):
    pass


class ShapeError(GuidedSegError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyMaskError(GuidedSegError, ValueError):
    """A mask that must select at least one pixel selects none."""


class ConfigError(GuidedSegError, ValueError):
    pass


class EpisodeSamplingError(GuidedSegError, ValueError):
    pass


class IngestionError(GuidedSegError):
    """Base class for dataset directory problems; ``path`` names the offending file."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class MalformedHeaderError(IngestionError):
    pass


class SizeMismatchError(IngestionError):
    pass


class EmptyMaskFileError(IngestionError):
    pass


class SplitOverlapError(IngestionError):
    pass


class CheckpointError(GuidedSegError):
    pass


class TrainingDivergedError(GuidedSegError, FloatingPointError):
    def __init__(self, episode_seed, loss):
        self.episode_seed = episode_seed
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at episode seed {episode_seed}")


class ProtocolError(GuidedSegError, ValueError):
    pass
