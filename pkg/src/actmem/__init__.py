"""Byte-exact activation accounting and memory-saving operators for an encoder layer.

The reference operators retain what a stock framework retains. Their in-place
twins keep outputs, masks and per-row statistics instead of inputs, and a
stash ledger measures the difference.
"""

from .errors import (ActmemError, ConfigFileError, ConfigurationError, DivergenceError, DomainError,
                     FitError, LifecycleError, ParameterError, ShapeError, TableFormatError,
                     TapeStateError, VerificationError)
from .gelu_fit import GeluMinimum, GeluPolyTable, default_table, fit_table, locate_minimum
from .memory_model import EncoderConfig, layer_activation_bytes, memory_report, savings
from .tape import LazyStash, Tape, Var
from .tensor import BoolMask, Role, StashLedger, Tensor

__version__ = "0.1.0"

__all__ = [
    "ActmemError", "ConfigFileError", "ConfigurationError", "DivergenceError", "DomainError",
    "FitError", "LifecycleError", "ParameterError", "ShapeError", "TableFormatError",
    "TapeStateError", "VerificationError", "GeluMinimum", "GeluPolyTable", "default_table",
    "fit_table", "locate_minimum", "EncoderConfig", "layer_activation_bytes", "memory_report",
    "savings", "LazyStash", "Tape", "Var", "BoolMask", "Role", "StashLedger", "Tensor",
]
