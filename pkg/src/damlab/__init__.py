"""Debiased autoregressive models for policy effects on count panels."""

__version__ = "0.1.0"
