"""Disentangled collaborative filtering: macro concepts, micro dimensions,
controllable retrieval."""

__version__ = "0.1.0"
