class BevlocError(Exception):
    """Base class for all library errors."""


class ParameterError(BevlocError, ValueError):
    pass


class FormatError(BevlocError, ValueError):
    """Malformed or corrupt input file."""


class StructuralError(BevlocError, ValueError):
    """Tensor shape or layer-chain mismatch."""


class RangeError(BevlocError, IndexError):
    pass


class InsufficientDataError(BevlocError):
    pass


class NoConsensusError(BevlocError):
    def __init__(self, msg: str, best_inliers: int = 0):
        super().__init__(msg)
        self.best_inliers = best_inliers


class ConfigMismatchError(BevlocError):
    pass
