"""Exception types shared across the toolkit."""


class TrajDiffError(Exception):
    pass


class Unsolvable(TrajDiffError):
    """The finite-element system for a configuration could not be solved."""


class SingularSystem(Unsolvable):
    pass


class NonConvergence(Unsolvable):
    pass


class NoProgress(TrajDiffError):
    pass


class DegenerateNormalization(TrajDiffError):
    pass


class ShapeMismatch(TrajDiffError, ValueError):
    pass


class NonFiniteLoss(TrajDiffError, FloatingPointError):
    pass


class MissingPerformance(TrajDiffError):
    pass


class NotSupported(TrajDiffError, NotImplementedError):
    pass


class LengthMismatch(TrajDiffError, ValueError):
    pass


class CorruptRecord(TrajDiffError):
    pass


class ExhaustedAttempts(TrajDiffError):
    pass
