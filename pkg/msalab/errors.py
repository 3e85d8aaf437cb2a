from __future__ import annotations

from typing import Optional


class MsaLabError(Exception):
    """Base class for every error raised by msalab."""


class DimensionError(MsaLabError, ValueError):
    """Configurations or cubes with mismatched (n, d)."""


class ParameterError(MsaLabError, ValueError):
    """A numeric parameter is outside the range an operation accepts."""


class CoverageError(MsaLabError, ValueError):
    """A disorder realization does not cover the sites a cube needs."""


class ClassificationError(MsaLabError, ValueError):
    """Interactivity (PI/FI) is undefined for the given cube."""


class DecompositionError(MsaLabError, ValueError):
    """A Green-function decomposition was requested for a cube that does not factor."""


class RegionError(MsaLabError, ValueError):
    """A region is not contained in the cube it is evaluated on."""


class PreconditionError(MsaLabError, ValueError):
    """A hypothesis of the checked estimate does not hold."""


class ResonanceError(MsaLabError, ArithmeticError):
    """E sits on (or numerically at) the spectrum, so the resolvent does not exist."""

    def __init__(self, energy: float, eta: float):
        super().__init__(f"Energy is resonant: E={energy!r} eta={eta:.3e}")
        self.energy = energy
        self.eta = eta

    def __reduce__(self):
        return type(self), (self.energy, self.eta)


class ResourceLimitError(MsaLabError, RuntimeError):
    """A dense matrix would exceed the configured dimension cap."""

    def __init__(self, dimension: int, cap: int, what: str):
        super().__init__(f"Dimension {dimension} exceeds cap {cap} for {what}")
        self.dimension = dimension
        self.cap = cap
        self.what = what

    # Trials raise these inside worker processes; the parent gets them back by pickle.
    def __reduce__(self):
        return type(self), (self.dimension, self.cap, self.what)


class ConfigError(MsaLabError, ValueError):
    """
    Invalid run configuration.

    field_path is a dotted path ("msa.theta") for schema errors; line/column are set
    for YAML syntax errors (1-based).
    """

    def __init__(
            self,
            message: str,
            field_path: Optional[str] = None,
            line: Optional[int] = None,
            column: Optional[int] = None,
    ):
        super().__init__(message)
        self.field_path = field_path
        self.line = line
        self.column = column

    def __reduce__(self):
        return type(self), (self.args[0], self.field_path, self.line, self.column)

    def diagnostic(self) -> str:
        if self.field_path:
            return f"{self.field_path}: {self}"
        if self.line is not None:
            return f"line {self.line}, column {self.column}: {self}"
        return str(self)
