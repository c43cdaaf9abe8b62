"""Exception hierarchy shared across the package."""


class MetaNOError(Exception):
    pass


class InvalidInputError(MetaNOError, ValueError):
    pass


class InvalidArgumentError(MetaNOError, ValueError):
    pass


class InvalidSpectrumError(MetaNOError, ValueError):
    pass


class DegenerateReferenceError(MetaNOError, ZeroDivisionError):
    pass


class InvalidGraphError(MetaNOError, ValueError):
    pass


class InvalidDatasetError(MetaNOError, ValueError):
    pass


class InvalidSplitError(MetaNOError, ValueError):
    pass


class InvalidConstructionError(MetaNOError, ValueError):
    pass


class RankDeficientError(MetaNOError, ValueError):
    pass


class SingularSystemError(MetaNOError, ArithmeticError):
    pass


class TrainingDivergedError(MetaNOError, FloatingPointError):
    pass


class FileFormatError(MetaNOError, ValueError):
    pass


class FileLengthError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


class ConfigError(MetaNOError, ValueError):
    pass
