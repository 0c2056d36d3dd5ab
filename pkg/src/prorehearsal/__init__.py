"""Continual multitask learning with prospective rehearsal."""

__version__ = "0.1.0"
