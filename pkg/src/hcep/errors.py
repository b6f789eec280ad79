"""Exception types shared across the package."""


class HcepError(Exception):
    """Base class for all package-specific errors."""


# hierarchy construction / lookup
class CycleError(HcepError):
    """A parent chain revisits a node."""


class OrphanError(HcepError):
    """A non-root node references a missing parent."""


class LevelError(HcepError):
    """A parent is not exactly one level above its child."""


class DuplicateIdError(HcepError):
    """Two nodes share an id, or two nodes at one level share a name."""


class UnknownNodeError(HcepError):
    """A node id is not part of the hierarchy."""


class UnmappedCategoryError(HcepError):
    """An external category string has no registered node."""


# arrays / tensors
class ShapeMismatchError(HcepError):
    """Two arrays that must share a shape do not."""


class ShapeError(HcepError):
    """An input does not satisfy a shape precondition."""


# dataset generation and IO
class ConfigError(HcepError):
    """A configuration value is invalid or unsatisfiable."""


class FractionError(HcepError):
    """Pool fractions do not form a valid partition."""


class IoError(HcepError):
    """A sample or manifest could not be read or written."""


class CorruptSampleError(HcepError):
    """On-disk sample bytes fail their checksum."""


# training / evolution
class EmptyPoolError(HcepError):
    """An operation requires a non-empty sample pool."""


class DivergenceError(HcepError):
    """The training loss became non-finite."""


class PoolConsistencyError(HcepError):
    """Labeled/unlabeled/test pools violate disjointness or conservation."""


class InsufficientSamplesError(HcepError):
    """Not enough samples exist to satisfy a sampling request."""
