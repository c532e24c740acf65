"""Autoregressive generation of 3D molecular geometries on a numpy autodiff core."""

__version__ = "0.1.0"
