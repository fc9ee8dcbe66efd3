"""
Exception hierarchy for the mixture-rate toolkit.
Every failure raised by the library derives from MixRateError so the harness
can dispatch on type and map anything unexpected to exit code 1.
"""

from typing import Any, Dict, Optional


class MixRateError(Exception):
    """Base class for all library errors"""


class InvalidParameterError(MixRateError, ValueError):
    """A parameter is outside its admissible range"""


class NumericalFailureError(MixRateError):
    """A numerical computation produced a non-finite or divergent value"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{base} ({details})"


class UnsupportedKernelError(MixRateError):
    """The kernel lacks a property the operation requires (e.g. symmetry)"""


class UnsupportedTargetError(MixRateError):
    """The target lacks a property the operation requires (e.g. a gradient)"""


class QuadratureDomainError(MixRateError):
    """The quadrature box does not cover the region the integrand lives on"""


class InsufficientDataError(MixRateError):
    """Too few usable points for a fit or a rate comparison"""


class SmoothnessUnknownError(InvalidParameterError):
    """The smoothness constant K2 is not known for this target and exponent"""

    def __init__(self, target_name: str, p: float):
        super().__init__(
            f"K2 is unknown for target '{target_name}' at p={p}; "
            f"run estimate_smoothness (or resolve_smoothness) first"
        )
        self.target_name = target_name
        self.p = p


class ConfigError(MixRateError):
    """A configuration file failed to parse or validate"""

    def __init__(self, message: str, section: Optional[str] = None,
                 field: Optional[str] = None, line: Optional[int] = None):
        self.section = section
        self.field = field
        self.line = line
        location = ""
        if section and field:
            location = f"[{section}] {field}"
        elif section:
            location = f"[{section}]"
        if line is not None:
            location = f"{location} (line {line})" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
