"""Desk-scale simulator of distributed SGD under bidirectional compression:
memory-based model-compression algorithms, their baselines, diagnostic
quantities, and Monte-Carlo validation oracles."""

from . import algorithms, compressors, metrics, problems, validation  # noqa: F401

__version__ = "0.1.0"
