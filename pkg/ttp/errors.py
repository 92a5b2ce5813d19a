class TTPError(Exception):
    """Root of every error raised by the ttp package."""


class UsageError(TTPError):
    pass


# data
class MalformedFile(TTPError):
    pass


class UnknownFormat(TTPError):
    pass


class IoFailure(TTPError):
    pass


class InsufficientSamples(TTPError):
    pass


class StreamExhausted(TTPError):
    pass


# models / weights
class ShapeMismatch(TTPError):
    pass


class BadMagic(TTPError):
    pass


class VersionMismatch(TTPError):
    pass


class ChecksumMismatch(TTPError):
    pass


# projection / losses
class BudgetViolation(TTPError):
    pass


class ZeroNormRow(TTPError):
    pass


class BadClassIndex(TTPError):
    pass


# training
class NotFrozen(TTPError):
    pass


class DidNotConverge(TTPError):
    pass


class NaNLoss(TTPError):
    pass


# evaluation
class BadWindow(TTPError):
    pass


class MissingTargetTag(TTPError):
    pass
