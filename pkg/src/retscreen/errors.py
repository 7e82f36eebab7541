"""Common error base for the screening pipeline.

Every domain error raised by this package derives from ScreeningError so the
CLI can map them to exit code 1 uniformly.
"""


class ScreeningError(Exception):
    pass


class IoError(ScreeningError):
    """Filesystem read/write failure wrapped as a domain error."""
