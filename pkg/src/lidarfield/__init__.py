"""LiDAR waveform simulation and volumetric LiDAR field fitting."""

__version__ = "0.1.0"
