"""Shared exception types."""


class ValidationError(Exception):
    """Raised when user-supplied inputs (configs, manifests, CLI args) are invalid."""
