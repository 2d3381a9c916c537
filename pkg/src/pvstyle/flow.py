"""Optical-flow I/O, backward warping, and temporal-consistency weights.

Flow fields are (H, W, 2) float arrays holding per-pixel displacements
(u, v) in pixels, u horizontal.  A backward flow for frame i maps pixel
positions in frame i to positions in frame i-1.  Files use the Middlebury
.flo layout: f32 magic 202021.25, i32 width, i32 height, then row-major
(u, v) f32 pairs, little-endian.

Naming convention: ``backward_%05d_%05d.flo`` for the i -> i-j flow and
``forward_%05d_%05d.flo`` for i-j -> i, with the frame pair in the name.

Consistency weights are binary {0, 1}: a pixel is excluded (weight 0)
where the forward-backward check flags a disocclusion, where the flow
gradient flags a motion boundary, or where the forward-flow sample falls
outside the image.  No smoothing is applied.
"""

import struct

import numpy as np

from . import PVStyleError

FLO_MAGIC = 202021.25

# Exclusion thresholds from the video style transfer literature; the
# disocclusion test is |wt + wh|^2 > DISOCC_REL*(|wt|^2+|wh|^2) + DISOCC_ABS
# and the motion-boundary test |grad wh|^2 > MOTION_REL*|wh|^2 + MOTION_ABS.
DISOCC_REL = 0.01
DISOCC_ABS = 0.5
MOTION_REL = 0.01
MOTION_ABS = 0.002


class FlowFormatError(PVStyleError):
    pass


def read_flo(path):
    """Read a Middlebury .flo file as an (H, W, 2) float32 array."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise FlowFormatError(f"{path}: no such file") from None
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic} (expected {FLO_MAGIC})")
    if w <= 0 or h <= 0 or w * h > 10**8:
        raise FlowFormatError(f"{path}: implausible dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FlowFormatError(
            f"{path}: truncated data ({len(data)} bytes, expected {expected})")
    field = np.frombuffer(data[12:expected], dtype="<f4").reshape(h, w, 2)
    return field.copy()


def write_flo(field, path):
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 3 or field.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow field, got {field.shape}")
    h, w = field.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(field.astype("<f4").tobytes())


def synth_translation_flow(h, w, dx, dy):
    """Constant (dx, dy) field; test fixture for warping and weights."""
    field = np.empty((h, w, 2))
    field[:, :, 0] = dx
    field[:, :, 1] = dy
    return field


def _bilinear_sample(data, xs, ys):
    """Sample (H, W, C) data at float positions; returns values and validity.

    Positions outside [0, W-1] x [0, H-1] are invalid and yield zeros.
    """
    h, w = data.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(int)
    y0 = np.floor(yc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    out = ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x1])
           + fy * ((1 - fx) * data[y1, x0] + fx * data[y1, x1]))
    out[~valid] = 0.0
    return out, valid.astype(np.float64)


def backward_warp(img, field):
    """Pull img through the flow: warped(p) = img sampled at p + flow(p).

    Returns the warped image and a {0,1} validity map; out-of-bounds
    samples are zero-filled and marked invalid.
    """
    img = np.asarray(img, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if img.shape[:2] != field.shape[:2]:
        raise ValueError(
            f"image {img.shape[:2]} and flow {field.shape[:2]} dimensions differ")
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    warped, valid = _bilinear_sample(img, xs + field[:, :, 0], ys + field[:, :, 1])
    return warped, valid


def consistency_weights(forward, backward,
                        disocc_rel=DISOCC_REL, disocc_abs=DISOCC_ABS,
                        motion_rel=MOTION_REL, motion_abs=MOTION_ABS):
    """Binary per-pixel weights excluding disocclusions and motion boundaries.

    ``forward`` is the i-1 -> i flow, ``backward`` the i -> i-1 flow; the
    forward flow is sampled at the backward-displaced position before the
    round-trip test.
    """
    forward = np.asarray(forward, dtype=np.float64)
    backward = np.asarray(backward, dtype=np.float64)
    if forward.shape != backward.shape:
        raise ValueError(
            f"flow shapes differ: {forward.shape} vs {backward.shape}")
    h, w = backward.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tilde, valid = _bilinear_sample(
        forward, xs + backward[:, :, 0], ys + backward[:, :, 1])

    round_trip = np.sum((tilde + backward) ** 2, axis=2)
    magnitudes = np.sum(tilde ** 2, axis=2) + np.sum(backward ** 2, axis=2)
    disoccluded = round_trip > disocc_rel * magnitudes + disocc_abs

    du_dy, du_dx = np.gradient(backward[:, :, 0])
    dv_dy, dv_dx = np.gradient(backward[:, :, 1])
    grad_energy = du_dx ** 2 + du_dy ** 2 + dv_dx ** 2 + dv_dy ** 2
    boundary = grad_energy > motion_rel * np.sum(backward ** 2, axis=2) + motion_abs

    weights = np.ones((h, w))
    weights[disoccluded | boundary | (valid == 0)] = 0.0
    return weights


def backward_flow_path(directory, i, j=1):
    return f"{directory}/backward_{i:05d}_{i - j:05d}.flo"


def forward_flow_path(directory, i, j=1):
    return f"{directory}/forward_{i - j:05d}_{i:05d}.flo"
