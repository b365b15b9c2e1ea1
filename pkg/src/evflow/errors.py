"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: FormatError -> 3 (data/format),
NumericError -> 4 (numeric failure), anything argparse rejects -> 2.
"""


class EvflowError(Exception):
    """Base class for all toolkit errors."""


class FormatError(EvflowError):
    """Malformed file, header, or mismatched data contract."""


class StreamOrderError(EvflowError):
    """Event timestamps regressed in a stream or file.

    ``index`` is the first offending record (when known); ``bins`` lists
    already-emitted bin indices the late event would have touched.
    """

    def __init__(self, message, index=None, bins=None):
        super().__init__(message)
        self.index = index
        self.bins = list(bins) if bins is not None else []


class NumericError(EvflowError):
    """Undefined or diverging numeric result (zero variance, NaN loss, ...)."""
