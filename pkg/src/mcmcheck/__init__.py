"""Explicit-state model checker for programs under configurable memory models."""

__version__ = "0.1.0"
