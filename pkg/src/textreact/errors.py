class TextReactError(Exception):
    """Base class for all package errors."""
