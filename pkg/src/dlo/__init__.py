"""Depth expansion with routed, per-token MLP skipping for small decoder-only transformers."""

from .errors import DLOError

__all__ = ["DLOError", "__version__"]
__version__ = "0.1.0"
