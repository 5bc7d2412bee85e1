"""Modality-decorrelating stable learning for multimedia recommendation."""

__version__ = "0.1.0"
