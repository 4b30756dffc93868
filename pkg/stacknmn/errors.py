"""Exception types.

Every error also derives from the builtin it refines, so callers that only
know ``ValueError``/``KeyError``/``RuntimeError`` keep working.
"""
from __future__ import annotations

from typing import Any, Dict, Optional


class StackNMNError(Exception):
    """Base class for all stacknmn failures."""


class ShapeError(StackNMNError, ValueError):
    pass


class NumericalError(StackNMNError, FloatingPointError):
    pass


class SimplexError(StackNMNError, ValueError):
    """Mixture weights do not form a probability simplex."""


class VocabularyError(StackNMNError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ControllerStepError(StackNMNError, IndexError):
    pass


class StackBoundsError(StackNMNError, RuntimeError):
    pass


class StackOverflowError(StackBoundsError):
    pass


class StackUnderflowError(StackBoundsError):
    pass


class LayoutError(StackNMNError, ValueError):
    pass


class GenerationError(StackNMNError, RuntimeError):
    pass


class RetrySignal(StackNMNError):
    """A template does not apply to the sampled scene; sample again."""


class DatasetParseError(StackNMNError, ValueError):
    def __init__(self, message: str, *, line_number: Optional[int] = None) -> None:
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{prefix}{message}")


class CheckpointError(StackNMNError, ValueError):
    pass


class ConfigError(StackNMNError, ValueError):
    pass


class TrainingError(StackNMNError, RuntimeError):
    def __init__(self, message: str, *, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
