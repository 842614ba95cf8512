"""Sliding-window visual-inertial odometry backend.

The window is partitioned into fixed-size blocks of keyframes; long feature
tracks are re-anchored at block boundaries with their inverse depth carried
over by a prediction step, and the normal equations are solved along a
block-ordered elimination tree instead of one dense factorization.
"""

__version__ = "0.1.0"

from . import errors

__all__ = ["errors", "__version__"]
