"""Miniature CTR recommendation platform.

Pipeline configuration, consistent offline/online feature generation,
DeepFM-style training with incremental update streaming, low-latency
serving, hyper-parameter search, variational-dropout feature selection,
and an event-time sample joiner.
"""

__version__ = "0.1.0"
