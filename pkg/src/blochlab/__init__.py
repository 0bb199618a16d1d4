"""Desk-scale laboratory for recursive Bloch spectra of a 2D limit-periodic operator."""

__version__ = "0.1.0"
