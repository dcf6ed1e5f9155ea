"""Unsupervised 3D object prototype discovery from posed RGB-D views."""

import warnings

# numba falls back to another threading layer when the system TBB is too old
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

__version__ = "0.1.0"
