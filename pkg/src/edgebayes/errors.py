"""Exception hierarchy shared by all edgebayes modules."""


class EdgeBayesError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EdgeBayesError, ValueError):
    pass


class NumericError(EdgeBayesError, ArithmeticError):
    pass


class DomainError(EdgeBayesError, ValueError):
    pass


class ParameterError(EdgeBayesError, ValueError):
    pass


class StructureError(EdgeBayesError, ValueError):
    pass


class DataError(EdgeBayesError, ValueError):
    pass


class MethodError(EdgeBayesError, TypeError):
    pass


class FormatError(EdgeBayesError):
    """Archive or dataset file is not in the expected format."""


class CorruptionError(FormatError):
    def __init__(self, message, blob_index=None):
        super().__init__(message)
        self.blob_index = blob_index


class VersionError(FormatError):
    pass
