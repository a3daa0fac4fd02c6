"""Retrieval-augmented repository-level code generation and evaluation."""

__version__ = "0.1.0"
