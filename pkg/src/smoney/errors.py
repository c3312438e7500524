"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain of the quantity being evaluated."""


class PreconditionError(ValueError):
    """One or more named inequality constraints are violated.

    ``violations`` holds ``(name, margin)`` pairs; a negative margin measures
    how far the inequality is from holding.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        text = "; ".join(f"{name} (margin {margin:.6g})" for name, margin in self.violations)
        super().__init__(f"constraint violated: {text}")


class CapabilityError(RuntimeError):
    """The request is well formed but beyond what the implementation supports."""


class StructuralError(ValueError):
    """A protocol geometry or transcript is malformed."""


class BoundaryWarning(UserWarning):
    """A parameter sits on the closed boundary of an open domain."""
