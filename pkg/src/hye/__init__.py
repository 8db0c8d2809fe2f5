"""Desk-scale conditional diffusion engine for synthetic SAR imagery."""

__version__ = "0.1.0"
