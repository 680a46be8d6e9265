"""Exception types raised across the package."""


class DDTSegError(Exception):
    pass


class TileTooLarge(DDTSegError, ValueError):
    pass


class MalformedTileSet(DDTSegError, ValueError):
    pass


class IoError(DDTSegError, OSError):
    pass


class UnsupportedTiff(DDTSegError, ValueError):
    def __init__(self, message, tag=None):
        super().__init__(message)
        self.tag = tag


class ShapeError(DDTSegError, ValueError):
    pass


class StateError(DDTSegError, RuntimeError):
    pass


class PrecisionError(DDTSegError, TypeError):
    pass


class InvalidArgument(DDTSegError, ValueError):
    pass


class InvalidTarget(DDTSegError, ValueError):
    pass


class ConfigError(DDTSegError, ValueError):
    pass


class InvalidWeights(DDTSegError, ValueError):
    pass


class EmptyBoundary(DDTSegError, ValueError):
    pass


class DegenerateTest(DDTSegError, ValueError):
    pass


class NoMarkersWarning(UserWarning):
    pass


class NonFiniteError(DDTSegError, ValueError):
    pass
