"""Segment-based LiDAR place recognition with motion-aligned visual views."""

__version__ = "0.1.0"
