"""LiDAR global localization from bird's-eye-view density images."""

__version__ = "0.1.0"
