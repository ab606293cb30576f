"""Cooperative LiDAR perception closed-loop with max-pressure signal control."""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
