"""Evaluation harness for LLMs acting as narrative-driven movie recommenders."""

__version__ = "0.1.0"
