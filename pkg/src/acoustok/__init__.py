"""Unsupervised discovery of multi-granular acoustic tokens and bottleneck features."""

__version__ = "0.1.0"
