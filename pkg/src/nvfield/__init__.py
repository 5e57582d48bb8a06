"""Neural vector fields: learned displacement-to-surface fields and differentiation-free meshing."""

__version__ = "0.1.0"
