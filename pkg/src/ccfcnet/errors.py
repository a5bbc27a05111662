"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit status without inspecting messages.
"""


class CCFCError(Exception):
    exit_code = 4


class ConfigError(CCFCError, ValueError):
    exit_code = 2


class SpecError(ConfigError):
    pass


class DataError(CCFCError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class ConstantSeries(DataError):
    pass


class TooSmall(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DegenerateVector(CCFCError, ArithmeticError):
    pass


class DegeneratePrototype(DegenerateVector):
    pass


class DegenerateSample(CCFCError, ArithmeticError):
    pass


class DomainError(CCFCError, ArithmeticError):
    pass


class NoValidPairs(CCFCError):
    pass


class EmptyFilter(CCFCError):
    pass


class FilterFail(CCFCError):
    def __init__(self, subject_id, reason):
        self.subject_id = subject_id
        self.reason = reason
        super().__init__(f"subject {subject_id!r} filtered out: {reason}")


class TooFewPatients(CCFCError):
    pass
