"""Exception types shared across the package."""

from __future__ import annotations


class SptnError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(SptnError):
    def __init__(self, expected: object, actual: object, what: str = "input"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")


class NotOrthogonalError(SptnError):
    """Input matrix fails the orthogonality or positive-determinant check."""


class DegenerateReflectionError(SptnError):
    """Householder vector norm below the 1e-12 floor."""


class NonInvertibleError(SptnError):
    """Diagonal entry below the invertibility floor."""


class OutsideRangeError(SptnError):
    """Value outside the range of the (monotone) nonlinearity."""


class CircuitInvalidError(SptnError):
    """Circuit failed structural validation; carries the violation list."""

    def __init__(self, issues):
        self.issues = list(issues)
        lines = "; ".join(str(i) for i in self.issues)
        super().__init__(f"invalid circuit: {lines}")


class ExpansionCapError(SptnError):
    def __init__(self, required: int, cap: int):
        self.required = required
        self.cap = cap
        super().__init__(
            f"mixture expansion needs {required} components, cap is {cap}"
        )


class NotTractableError(SptnError):
    """Exact marginalization is not available for this circuit."""

    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        super().__init__(message)


class NullEvidenceError(SptnError):
    """Conditioning on evidence with vanishing density."""


class TrainingDivergedError(SptnError):
    """Too many non-finite minibatch losses/gradients."""


class NonFiniteGradientError(SptnError):
    def __init__(self, blocks):
        self.blocks = list(blocks)
        super().__init__(f"non-finite gradient in parameter block(s): {', '.join(self.blocks)}")


class CsvFormatError(SptnError):
    """Malformed CSV input; message carries offending line numbers."""


class ModelFormatError(SptnError):
    """Unreadable or unsupported model file."""
