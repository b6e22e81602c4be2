"""Exception types shared across the toolkit."""


class AnnotationParseError(ValueError):
    """Raised when an input file is structurally malformed (bad JSON, missing keys)."""


class ValidationError(ValueError):
    """Raised when well-formed data violates a documented invariant."""


class BackendError(RuntimeError):
    """Raised when an external classifier backend fails or misbehaves."""
