"""Simulator and toolkit for the z-axis feedback loop of a scanning tunneling microscope."""

__version__ = "0.1.0"
