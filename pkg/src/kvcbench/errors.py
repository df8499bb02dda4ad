"""Shared exception types, mapped to CLI exit codes in cli.py."""


class KvcError(Exception):
    """Base class for workbench errors."""


class UsageError(KvcError):
    """Bad arguments or configuration (CLI exit 2)."""


class MissingArtifactError(KvcError):
    """A referenced file does not exist (CLI exit 3)."""


class FormatError(KvcError):
    """A binary container is malformed, truncated, or version-incompatible."""


class StaleCacheError(KvcError):
    """Artifact fingerprints do not match the current model/corpus (CLI exit 4)."""


class MalformedSequenceError(KvcError):
    """A token id outside the vocabulary was passed to detokenize."""


class PositionOverflowError(KvcError):
    """An assigned position exceeds the model's max_position."""
