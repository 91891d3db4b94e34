"""Exception hierarchy shared across the package.

Every error raised on a user-facing path names the violated precondition
and, where it exists, the feasible range.
"""


class GrowlabError(Exception):
    """Base class for all package errors."""


class ConfigError(GrowlabError):
    """Invalid configuration value, unknown config key, or empty search space."""


class DataError(GrowlabError):
    """Bad input data: out-of-range token ids, empty corpus, ragged traces."""


class OperatorError(GrowlabError):
    """Growth operator violates its invariants or is infeasible for the model depth."""


class MappingError(GrowlabError):
    """Layer map references a layer that does not exist in the source state."""


class StateError(GrowlabError):
    """Optimizer state does not match the parameter structure."""


class CheckpointError(GrowlabError):
    """Checkpoint is structurally inconsistent or corrupt on disk."""


class StorageError(GrowlabError):
    """Filesystem-level failure while reading or writing run artifacts."""


class RaceError(GrowlabError):
    """Candidate race could not produce a winner (all candidates failed, audit mismatch)."""


class DegenerateDataError(GrowlabError):
    """Statistic undefined for the given input (zero variance, zero loss range)."""
