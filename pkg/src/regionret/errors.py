"""Exception hierarchy shared across the package."""


class RegionRetError(Exception):
    """Base class for all package errors."""


class DimensionError(RegionRetError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateVectorError(RegionRetError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class ParameterError(RegionRetError):
    """An argument value is outside its legal range."""


class InsufficientDataError(RegionRetError):
    """Too few samples for the requested batching or fold split."""


class ConfigValidationError(RegionRetError):
    """A training/run configuration violates a documented constraint."""


class EmptyPositiveError(RegionRetError):
    """A contrastive batch contains no positive pair at all."""


class UnknownAnatomyError(RegionRetError):
    """A query's pseudo label has no model in the index."""

    def __init__(self, label):
        super().__init__(f"no index model for anatomy label {label}")
        self.label = label


# Dataset loading --------------------------------------------------------

class DatasetError(RegionRetError):
    """Base class for dataset load/validation failures."""


class MissingFileError(DatasetError):
    pass


class MalformedImageError(DatasetError):
    pass


class ManifestFormatError(DatasetError):
    pass


class OutOfBoundsBoxError(DatasetError):
    pass


class DuplicateLabelError(DatasetError):
    pass


class UnsupportedClassCountError(DatasetError):
    pass


# Checkpoint / binary formats --------------------------------------------

class PersistenceError(RegionRetError):
    """Base class for binary file format failures."""


class FormatError(PersistenceError):
    """Bad magic bytes or a truncated/garbled file."""


class VersionError(PersistenceError):
    """The file's format version is not supported."""


class ShapeConsistencyError(PersistenceError):
    """A stored tensor disagrees with the shape its manifest declares."""
