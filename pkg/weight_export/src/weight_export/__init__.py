"""Checkpoint-to-container conversion for the stroke prognosis pipeline."""

__version__ = "0.1.0"
