"""Specifies the version of the kforge project."""

__version__ = "0.1.0"
