"""Per-channel soft masks from externally produced label maps.

Label maps are 8-bit single-channel PNGs (pixel value = class index),
named ``frame_%05d_seg.png`` per content frame and ``style_seg.png`` for
the style image.  A vocabulary file holds one ``index name`` pair per line.

Mask stacks keep a per-pixel partition of unity: channel weights sum to 1.
Downsampling is area averaging, which preserves that property; masks are
constants with respect to the optimization variable.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from . import PVStyleError


class LabelMapError(PVStyleError):
    pass


@dataclass(frozen=True)
class MaskStack:
    """(C, H, W) weights in [0, 1] plus the ordered label vocabulary."""

    weights: np.ndarray
    vocabulary: tuple

    @property
    def channels(self):
        return self.weights.shape[0]

    @property
    def shape(self):
        return self.weights.shape[1:]


def load_label_map(path):
    """Load an 8-bit grayscale PNG as an (H, W) integer label map."""
    try:
        with PILImage.open(path) as f:
            if f.mode != "L":
                raise LabelMapError(
                    f"{path}: label maps must be single-channel 8-bit, got mode {f.mode!r}")
            return np.asarray(f, dtype=np.int64)
    except FileNotFoundError:
        raise LabelMapError(f"{path}: no such file") from None


def save_label_map(labels, path):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label indices must fit in 8 bits")
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def masks_from_labels(labels, vocabulary):
    """One indicator channel per vocabulary entry; partition of unity exact."""
    labels = np.asarray(labels)
    vocabulary = tuple(vocabulary)
    present = set(np.unique(labels).tolist())
    missing = present - set(vocabulary)
    if missing:
        raise LabelMapError(f"labels {sorted(missing)} not in vocabulary {vocabulary}")
    weights = np.stack([(labels == v).astype(np.float64) for v in vocabulary])
    return MaskStack(weights, vocabulary)


def trivial_masks(h, w):
    """Single all-ones channel; the no-segmentation (C=1) case."""
    return MaskStack(np.ones((1, h, w)), (0,))


def _box_average_matrix(src, dst):
    # dst x src row-stochastic matrix of interval overlaps
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def downsample_masks(stack, target_h, target_w):
    """Area-average each channel; sums to 1 per pixel are preserved."""
    c, h, w = stack.weights.shape
    if target_h > h or target_w > w:
        raise ValueError(
            f"cannot upsample masks from {h}x{w} to {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return stack
    rows = _box_average_matrix(h, target_h)
    cols = _box_average_matrix(w, target_w)
    out = np.einsum("yh,chw,xw->cyx", rows, stack.weights, cols, optimize=True)
    return MaskStack(np.clip(out, 0.0, 1.0), stack.vocabulary)


def common_vocabulary(content_labels, style_labels):
    """Union of the two label sets, with per-channel usability flags.

    A channel is unusable when its mask mass is zero in either image;
    unusable channels are skipped by the style loss instead of being
    matched against a zero Gram target.
    """
    content_set = set(np.unique(np.asarray(content_labels)).tolist())
    style_set = set(np.unique(np.asarray(style_labels)).tolist())
    vocabulary = tuple(sorted(content_set | style_set))
    usable = tuple(v in content_set and v in style_set for v in vocabulary)
    return vocabulary, usable


def load_vocabulary(path):
    """Plain text vocabulary: one ``index name`` pair per line."""
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            try:
                idx = int(parts[0])
            except ValueError:
                raise LabelMapError(
                    f"{path}:{line_no}: bad vocabulary line {line!r}") from None
            entries.append((idx, parts[1] if len(parts) > 1 else str(idx)))
    return entries
