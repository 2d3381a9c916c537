"""Photorealistic video style transfer by direct pixel-space optimization.

Images are numpy float64 arrays of shape (H, W, 3) with values in [0, 1],
RGB channel order, row-major.  8-bit quantization happens only at file
boundaries.  All interpolation uses the half-pixel-centered convention.
"""

__version__ = "0.1.0"


class PVStyleError(Exception):
    """Base class for all errors raised by this package."""
