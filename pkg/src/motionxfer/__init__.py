"""Pose-guided motion transfer with part-based neural rendering, at desk scale."""

__version__ = "0.1.0"
