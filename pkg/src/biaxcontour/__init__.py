"""Contouring control with robust invariant sets for a flexible biaxial gantry."""

__version__ = "0.1.0"
