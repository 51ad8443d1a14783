"""Experiment driver: configs, toy data, metrics, runs, and figures."""
