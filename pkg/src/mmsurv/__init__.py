"""Prototype-based multimodal survival modelling from patch bags and pathway graphs."""

__version__ = "0.1.0"
