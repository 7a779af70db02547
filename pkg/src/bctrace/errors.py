"""Exception hierarchy shared by all pipeline stages.

Two families matter for the CLI exit-code contract: ``InputError`` (bad
files, bad parameters, bad requests: exit code 2) and ``InvariantError``
(a violated internal contract detected mid-computation: exit code 3).
Anything else escaping a stage is an internal error (exit code 4).
"""


class BctraceError(Exception):
    exit_code = 4


class InputError(BctraceError):
    exit_code = 2


class InvariantError(BctraceError):
    exit_code = 3


class MalformedRow(InputError):
    """A line or record that does not match the expected format."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NonMonotoneTime(InputError):
    pass


class UnknownClass(InputError):
    def __init__(self, token):
        super().__init__(f"unknown object class {token!r}")
        self.token = token


class MissingKey(InputError):
    def __init__(self, key, where=""):
        super().__init__(f"missing key {key!r}" + (f" in {where}" if where else ""))
        self.key = key


class TypeMismatch(InputError):
    def __init__(self, key, reason=""):
        super().__init__(f"bad value for {key!r}" + (f": {reason}" if reason else ""))
        self.key = key


class RangeViolation(InputError):
    pass


class EmptyInput(InputError):
    pass


class MissingAtn(InputError):
    pass


class DegenerateVariance(InvariantError):
    pass


class ZeroNorm(InvariantError):
    pass


class InsufficientOverlap(InputError):
    pass


class ShiftTooLarge(InputError):
    pass


class BadThresholds(InputError):
    pass


class InsufficientLines(InputError):
    pass


class OutOfOrderFrame(InputError):
    pass


class NoWeatherCoverage(InputError):
    def __init__(self, bin_start):
        super().__init__(f"no weather sample within range of bin at t={bin_start}")
        self.bin_start = bin_start


class TooFewRows(InputError):
    pass


class SingularDesign(InvariantError):
    pass


class BadParams(InputError):
    pass


class GridEmpty(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class DatasetTooShort(InputError):
    def __init__(self, label):
        super().__init__(f"dataset {label!r} spans fewer than two windows")
        self.label = label


class BadK(InputError):
    pass


class LengthMismatch(InputError):
    pass


class ZeroVariance(InvariantError):
    pass


class TooManyFeatures(InputError):
    pass


class EmptyBackground(InputError):
    pass


class BadConfig(InputError):
    pass
