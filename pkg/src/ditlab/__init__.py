"""Desk-scale laboratory for a pose- and reference-conditioned video diffusion transformer."""

__version__ = "0.1.0"
