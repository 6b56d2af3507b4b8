"""Exception types shared across the package."""


class PdcapError(Exception):
    """Base class; ``kind`` is the short tag the CLI reports."""

    kind = "error"


class DimensionError(PdcapError, ValueError):
    kind = "dimension"


class ContractError(PdcapError, ValueError):
    kind = "contract"


class VocabularyError(PdcapError, IndexError):
    kind = "vocabulary"


class ConfigError(PdcapError, ValueError):
    kind = "config"


class FormatError(PdcapError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    kind = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
