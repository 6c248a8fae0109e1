"""Exception types shared across the package."""


class EgogaitError(Exception):
    """Base class for errors raised by this package."""


class ManifestError(EgogaitError):
    """Bad dataset manifest: missing file, malformed field, duplicate id,
    frame-count mismatch."""


class FormatError(EgogaitError):
    """Bad binary file: wrong magic, unsupported version, truncated payload."""


class ProtocolError(EgogaitError):
    """Split protocol unsupported by the manifest's tags."""
