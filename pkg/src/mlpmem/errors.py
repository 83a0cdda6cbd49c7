"""Exception hierarchy shared by every stage."""
from __future__ import annotations


class MlpMemError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(MlpMemError):
    """A binary artifact could not be parsed."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class DimensionMismatchError(MlpMemError):
    pass


class ConfigMismatchError(MlpMemError):
    """A checkpoint was loaded against a config it was not saved with."""


class ProvenanceError(MlpMemError):
    """An artifact was produced from a different upstream model or datastore."""


class VocabMismatchError(MlpMemError):
    pass


class ContextTooLongError(MlpMemError):
    pass


class DivergenceError(MlpMemError):
    """Training produced a non-finite loss."""
