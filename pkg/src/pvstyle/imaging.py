"""Raster data model and image file I/O.

An image is a (H, W, 3) float64 array in [0, 1], RGB, row-major.  PNG and
binary PPM (P6) are supported at 8 bits per channel; loading maps byte b to
b/255 exactly, saving quantizes with round-half-up and clamps to [0, 255].
Frame files follow the naming convention ``frame_%05d.png``, 0-based.
"""

import numpy as np
from PIL import Image as PILImage

from . import PVStyleError


class ImageIOError(PVStyleError):
    pass


def validate_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image dimensions must be >= 1, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def clamp01(img):
    return np.clip(img, 0.0, 1.0)


def load_image(path):
    """Load an 8-bit RGB PNG or PPM file as a float64 image in [0, 1]."""
    try:
        with PILImage.open(path) as f:
            if f.format not in ("PNG", "PPM"):
                raise ImageIOError(f"{path}: unsupported format {f.format!r}")
            if f.mode not in ("RGB", "L", "P"):
                raise ImageIOError(
                    f"{path}: unsupported mode {f.mode!r} (8-bit RGB required)")
            raw = np.asarray(f.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise ImageIOError(f"{path}: no such file") from None
    except ImageIOError:
        raise
    except Exception as e:
        raise ImageIOError(f"{path}: malformed image file ({e})") from None
    return raw.astype(np.float64) / 255.0


def save_image(img, path):
    """Quantize to 8-bit (round half up, clamped) and write PNG or P6 PPM."""
    img = validate_image(img)
    # np.round rounds half to even; the contract is round half up.
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    try:
        PILImage.fromarray(q, mode="RGB").save(path)
    except (OSError, ValueError) as e:
        raise ImageIOError(f"{path}: cannot write image ({e})") from None


def resize_bilinear(img, new_h, new_w):
    """Bilinear resize with half-pixel-centered sampling."""
    img = np.asarray(img, dtype=np.float64)
    if new_h < 1 or new_w < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = img.shape[:2]
    if (new_h, new_w) == (h, w):
        return img.copy()
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    if img.ndim == 2:
        fy = fy[..., 0]
        fx = fx[..., 0]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def frame_path(directory, index):
    return f"{directory}/frame_{index:05d}.png"
