"""Dependency-free notebook cell runner speaking a line-JSON event protocol."""

__all__ = ["__version__"]
__version__ = "0.1.0"
