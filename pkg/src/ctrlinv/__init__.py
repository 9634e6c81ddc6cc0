"""Clustering-based control inversion for wide-area damping control."""

from .errors import CtrlInvError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["CtrlInvError", "NumericalError", "ValidationError", "__version__"]
