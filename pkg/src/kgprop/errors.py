"""Exception hierarchy shared by every kgprop module."""


class KGPropError(Exception):
    """Base class for all library errors."""


class ValidationError(KGPropError, ValueError):
    """Bad input: wrong shapes, unknown names, invalid configuration."""


class MissingToken(ValidationError, KeyError):
    def __init__(self, label):
        super().__init__(label)
        self.label = label

    def __str__(self):
        return f"missing token for label {self.label!r}"


class DimensionMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class UnknownConcept(ValidationError, KeyError):
    def __str__(self):
        return f"unknown concept {self.args[0]!r}"


class UnmappedLabel(ValidationError, KeyError):
    def __str__(self):
        return f"label {self.args[0]!r} has no taxonomy concept"


class UnknownLabel(ValidationError, KeyError):
    def __str__(self):
        return f"unknown label {self.args[0]!r}"


class DuplicateName(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class ProbabilityOutOfRange(ValidationError):
    pass


class NonFiniteValue(KGPropError, ArithmeticError):
    """A NaN or infinity showed up in a numeric computation."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
