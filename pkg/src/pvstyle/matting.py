"""Matting Laplacian construction and the photorealism regularizer.

The Laplacian is Levin's closed-form matting matrix: for every fully
interior (2r+1)x(2r+1) window w_k with mean mu_k and 3x3 color covariance
Sigma_k,

    L_ij = sum over windows containing i and j of
           delta_ij - (1/|w|) * (1 + (I_i-mu_k)^T
                                 (Sigma_k + (eps/|w|) Id)^{-1} (I_j-mu_k))

It is symmetric, positive semidefinite, has zero row sums, and depends
only on the input image, so it is built once per frame and reused.  The
regularizer is the quadratic form summed over the three color channels;
its gradient per channel is 2 L v.
"""

import numpy as np
import scipy.sparse

from . import PVStyleError


class MattingError(PVStyleError):
    pass


def _inverse_3x3_sym(a):
    """Batched explicit adjugate inverse of symmetric 3x3 matrices."""
    a00, a01, a02 = a[:, 0, 0], a[:, 0, 1], a[:, 0, 2]
    a11, a12, a22 = a[:, 1, 1], a[:, 1, 2], a[:, 2, 2]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    inv = np.empty_like(a)
    inv[:, 0, 0] = c00
    inv[:, 0, 1] = inv[:, 1, 0] = c01
    inv[:, 0, 2] = inv[:, 2, 0] = c02
    inv[:, 1, 1] = c11
    inv[:, 1, 2] = inv[:, 2, 1] = c12
    inv[:, 2, 2] = c22
    inv /= det[:, None, None]
    return inv


def build_matting_laplacian(img, eps=1e-5, radius=1):
    """Sparse (N x N) matting Laplacian of an (H, W, 3) image, N = H*W."""
    img = np.asarray(img, dtype=np.float64)
    if eps <= 0:
        raise MattingError(f"eps must be positive, got {eps}")
    h, w = img.shape[:2]
    side = 2 * radius + 1
    if h < side or w < side:
        raise MattingError(
            f"image {h}x{w} too small for window radius {radius}")
    m = side * side

    idx = np.arange(h * w).reshape(h, w)
    win_idx = np.lib.stride_tricks.sliding_window_view(
        idx, (side, side)).reshape(-1, m)
    flat = img.reshape(-1, 3)
    win_colors = flat[win_idx]  # (n_windows, m, 3)

    mu = win_colors.mean(axis=1, keepdims=True)
    centered = win_colors - mu
    cov = np.einsum("nmi,nmj->nij", centered, centered) / m
    ridge = cov + (eps / m) * np.eye(3)
    inv = _inverse_3x3_sym(ridge)

    affinity = np.einsum("nmi,nij,nkj->nmk", centered, inv, centered,
                         optimize=True)
    vals = np.eye(m) - (1.0 + affinity) / m

    rows = np.repeat(win_idx, m, axis=1).ravel()
    cols = np.tile(win_idx, (1, m)).ravel()
    lap = scipy.sparse.coo_matrix(
        (vals.ravel(), (rows, cols)), shape=(h * w, h * w))
    lap = lap.tocsr()
    lap.sum_duplicates()
    return lap


def apply(lap, v):
    """Sparse matrix-vector product L v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (lap.shape[0],):
        raise MattingError(
            f"vector length {v.shape} does not match Laplacian dimension {lap.shape[0]}")
    return lap @ v


def photorealism_loss(lap, img):
    """Quadratic-form value over RGB channels plus its pixel gradient."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h * w != lap.shape[0]:
        raise MattingError(
            f"image has {h * w} pixels, Laplacian dimension is {lap.shape[0]}")
    value = 0.0
    grad = np.empty_like(img)
    for c in range(3):
        v = img[:, :, c].ravel()
        lv = lap @ v
        value += float(v @ lv)
        grad[:, :, c] = (2.0 * lv).reshape(h, w)
    return value, grad


def dump_triplets(lap, path):
    """Debug dump: one ``i j value`` line per stored entry, sorted by (i, j)."""
    coo = lap.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as f:
        for k in order:
            f.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}\n")
