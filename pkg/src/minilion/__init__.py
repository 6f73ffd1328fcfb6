"""Desk-scale dual-level visual knowledge MLLM mechanisms."""

__version__ = "0.1.0"
