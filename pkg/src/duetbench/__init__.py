"""Duet benchmarking harness: run two SUT instances side by side, inject CPU
noise, and check whether the two versions perform differently."""

__version__ = "0.1.0"
