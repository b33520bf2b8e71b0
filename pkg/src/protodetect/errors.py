"""Exception taxonomy shared across the package."""


class ProtodetectError(Exception):
    """Base class for all library errors."""


class InvalidInput(ProtodetectError):
    """A caller passed values outside an operation's domain."""


class DimensionError(ProtodetectError):
    """Two vectors that must share a dimension do not."""


class FormatError(ProtodetectError):
    """A dataset file is malformed (corrupt header or a row violating invariants)."""


class FitError(ProtodetectError):
    """Prototype fitting is impossible for the given dataset."""


class Infeasible(ProtodetectError):
    """No perturbation can satisfy the forced-coordinate budget."""


class GammaUndefined(ProtodetectError):
    """Neither branch of the coordinate-gap threshold is defined."""


class TrainError(ProtodetectError):
    """Training diverged. Carries the offending epoch when known."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
