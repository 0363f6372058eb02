"""Evaluation toolkit for histopathology patch classifiers: performance, relevance, stain robustness."""

__version__ = "0.1.0"
