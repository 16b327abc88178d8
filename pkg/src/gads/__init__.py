"""Grouped Attention Deep Sets for head pose estimation from 3D facial landmarks."""

__version__ = "0.1.0"
