"""Spiking point-cloud classifier: single-step training, multi-step ensemble inference."""

__version__ = "0.1.0"
