"""Exception types shared across the package."""


class DnlsError(Exception):
    """Base class for all library-specific failures."""


class DegenerateRegionError(DnlsError):
    """A region has collapsed to zero soft area, so its mean is undefined."""


class NumericalError(DnlsError):
    """A gradient or energy evaluated to a non-finite value."""


class PgmFormatError(DnlsError):
    """A PGM stream violates the P5/maxval-255 interchange contract."""
