"""Cooperative generator training on exactly enumerable sequence spaces."""

__version__ = "0.1.0"
