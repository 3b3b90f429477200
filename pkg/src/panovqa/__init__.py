"""Probabilistic scanpath generation and blind panoramic video quality assessment."""

__version__ = "0.1.0"
