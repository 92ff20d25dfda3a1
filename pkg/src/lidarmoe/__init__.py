"""Multi-representation LiDAR feature learning on synthetic scenes."""

__version__ = "0.1.0"
