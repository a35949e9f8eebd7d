"""Exception types shared across the pipeline."""


class BiwristError(Exception):
    """Base class for all package errors."""


class InvalidArgument(BiwristError):
    pass


class MalformedDataset(BiwristError):
    pass


class ParseError(BiwristError):
    def __init__(self, path, row, message):
        super().__init__(f"{path}:{row}: {message}")
        self.path = str(path)
        self.row = row


class RecordingTooShort(BiwristError):
    pass


class SignalTooShort(BiwristError):
    pass


class ShapeError(BiwristError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.shapes = shapes


class StateMismatch(BiwristError):
    pass


class NumericalError(BiwristError):
    pass


class InsufficientSubjects(BiwristError):
    pass


class ConfigError(InvalidArgument):
    """Raised with the full list of offending config keys."""

    def __init__(self, problems):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = list(problems)
