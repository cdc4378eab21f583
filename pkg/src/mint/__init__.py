"""MINT: a wrapper that makes multi-modal classifiers interactive.

Sequences input acquisition per case by greedily estimating each candidate
input's value and stops early via calibrated thresholds.
"""

__version__ = "0.1.0"
