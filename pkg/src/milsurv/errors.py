"""Exception taxonomy shared across the engine.

Every error raised on purpose derives from MilsurvError so callers (and the
CLI) can tell engine failures apart from programming bugs.
"""


class MilsurvError(Exception):
    """Base class for all engine errors."""


class DimensionError(MilsurvError):
    """Shapes do not line up for an operation; message reports both shapes."""


class ConfigurationError(MilsurvError):
    """Invalid option, hyperparameter, or unknown identifier."""


class ContractError(MilsurvError):
    """A call violated an operation precondition (e.g. non-scalar loss)."""


class EmptyBagError(MilsurvError):
    """A reduction over the instance axis was asked for on zero instances."""


class NonFiniteError(MilsurvError):
    """A forward value or loss came out NaN/Inf."""


class CorruptFileError(MilsurvError):
    """Bad magic, version, or checksum in a binary file."""


class RegistryError(MilsurvError):
    """A feature matrix dimension disagrees with the extractor registry."""


class AlignmentError(MilsurvError):
    """Feature matrices cannot be fused: patch counts or coordinates differ."""


class IngestionError(MilsurvError):
    """A manifest row is invalid (duplicate id, negative survival, ...)."""


class DegenerateCohortError(MilsurvError):
    """Too few distinct uncensored survival times to place bin edges."""


class UndefinedMetricError(MilsurvError):
    """The concordance index has no comparable pairs to score."""
