"""GNSS Kalman filtering with road-network measurement updates."""

__version__ = "0.1.0"
