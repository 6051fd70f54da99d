"""Exception hierarchy shared by every module."""


class LeafSepError(Exception):
    """Base class for all library errors."""


class EmptyCloud(LeafSepError):
    pass


class DegenerateNeighborhood(LeafSepError):
    pass


class DegenerateSurface(LeafSepError):
    pass


class TooSparse(LeafSepError):
    pass


class ConfigError(LeafSepError):
    pass


class MissingColor(LeafSepError):
    pass


class IndexMismatch(LeafSepError):
    pass


class ParseError(LeafSepError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(LeafSepError):
    pass
