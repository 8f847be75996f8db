# src/services/exceptions.py
from typing import Iterable


class BertPerfError(Exception):
    """Base class for every error raised by the cost model"""
    pass


class ConfigError(BertPerfError):
    """Raised when a config document or record violates the schema"""

    def __init__(self, message: str, keys: Iterable[str] = ()):
        self.keys = list(keys)
        if self.keys:
            message = f"{message} [{', '.join(self.keys)}]"
        super().__init__(message)


class GraphError(BertPerfError):
    """Raised when an op graph is malformed or used out of sequence"""
    pass


class FusionError(BertPerfError):
    """Raised when a what-if fusion is illegal for the given ops"""
    pass


class ParallelismError(BertPerfError):
    """Raised when a parallel split cannot be applied"""
    pass


class LambError(BertPerfError):
    """Raised by the LAMB reference on bad vectors"""
    pass


class ReportError(BertPerfError):
    """Raised when estimates and schedule do not line up"""
    pass
