"""Distributed graph-neural knowledge representation learning."""

__version__ = "0.1.0"
