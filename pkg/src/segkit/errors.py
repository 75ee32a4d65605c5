"""Exception types shared across the package.

User-facing commands map these onto exit codes, so anything a user can
trigger with bad inputs should derive from SegkitUserError.
"""


class SegkitError(Exception):
    """Base class for all package-specific errors."""


class SegkitUserError(SegkitError):
    """Errors caused by user input (bad config, missing files, bad values)."""


class MissingFileError(SegkitUserError, FileNotFoundError):
    """A referenced file or directory does not exist."""


class UnsupportedFormatError(SegkitUserError):
    """File extension or data layout not supported by a codec."""


class CorruptHeaderError(SegkitUserError):
    """File exists but its header is not decodable."""


class MalformedIndexError(SegkitUserError):
    """Index CSV has a bad header or a bad row."""


class OutOfBoundsError(SegkitUserError):
    """Requested region exceeds the stored volume extent."""


class EmptyStreamError(SegkitUserError):
    """A sample stream was constructed from an empty source."""


class ShapeError(SegkitUserError):
    """Array shape incompatible with the requested operation."""


class EmptyMaskError(SegkitError):
    """Surface distances requested for an empty mask."""


class ConfigError(SegkitUserError):
    """Configuration file is invalid; message names the section and key."""
