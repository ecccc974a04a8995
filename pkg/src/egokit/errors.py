"""Exception hierarchy shared by every egokit module."""


class EgoKitError(Exception):
    """Base class for all errors raised by egokit."""


class ValidationError(EgoKitError):
    """Input failed a structural or range check (CLI exit code 1)."""


class NumericalError(EgoKitError):
    """A computation produced or met an invalid numerical state (CLI exit code 2)."""


# rotmath
class DegenerateInput(NumericalError):
    pass


class InvalidRotation(ValidationError):
    pass


class RankDeficient(NumericalError):
    pass


# handmodel / shapes
class LengthMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# dataset
class TooShort(ValidationError):
    pass


class FrustumViolation(ValidationError):
    pass


class FormatVersionMismatch(ValidationError):
    pass


class CorruptPayload(ValidationError):
    pass


# fmpolicy / retarget
class NonFinite(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NeverConverged(NumericalError):
    pass


class Stalled(NumericalError):
    pass


# tof
class OutOfOrderQuery(ValidationError):
    pass


class NoEstimates(ValidationError):
    pass


# metrics
class Degenerate(NumericalError):
    pass


class MissingTrack(ValidationError):
    pass
