"""Controlled SDEs with a default time, their adjoint BSDEs and maximum principles."""

__version__ = "0.1.0"
