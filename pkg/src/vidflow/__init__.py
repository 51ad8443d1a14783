"""Desk-scale flow-matching video stack: training, sampling, RLHF, curation,
feature serving, and parallelism equivalence simulations."""

__version__ = "0.1.0"
