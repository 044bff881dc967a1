"""
Exception hierarchy for the retrieval pipeline
"""
from typing import Optional


class RetrievalError(Exception):
    """Base class for every error raised by the pipeline"""


class ContractError(RetrievalError, ValueError):
    """A precondition of an operation was violated"""


class ParseError(RetrievalError, ValueError):
    """Malformed input file"""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.message = message
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}:"
        if line_number is not None:
            location += f"{line_number}:"
        super().__init__(f"{location} {message}" if location else message)


class IndexBuildError(RetrievalError):
    pass


class EmptyInputError(RetrievalError):
    """Ranker received an empty query or document after OOV filtering"""


class NumericError(RetrievalError, ArithmeticError):
    pass


class TrainingError(RetrievalError):
    pass


class ConfigError(RetrievalError):
    pass


class UndefinedMetricError(RetrievalError):
    """Recall and nDCG need at least one relevant document"""


class MissingCheckpointError(RetrievalError):
    pass
