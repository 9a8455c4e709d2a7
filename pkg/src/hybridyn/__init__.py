"""Hybrid quantum-classical dynamics from continuous measurement and feedback."""

__version__ = "0.1.0"
