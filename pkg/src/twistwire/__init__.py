"""Electron scattering through a twisted rectangular quantum wire with a longitudinal well."""

from .model import WaveguideSpec, level_table

__all__ = ["WaveguideSpec", "level_table"]
__version__ = "0.1.0"
