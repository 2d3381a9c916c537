"""Compact convolutional feature extractor with an exact backward pass.

Fixed architecture, three spatial scales:

    conv3x3(3->16)  + ReLU   relu1_1
    conv3x3(16->16) + ReLU   relu1_2
    avgpool 2x2 stride 2
    conv3x3(16->32) + ReLU   relu2_1
    conv3x3(32->32) + ReLU   relu2_2
    avgpool 2x2 stride 2
    conv3x3(32->64) + ReLU   relu3_1

All convolutions are stride 1 with reflection padding; pooling floors odd
dimensions.  Weights load from PVST files or from a seeded deterministic
generator; there is no training code.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import PVStyleError

# (conv name, relu name, in channels, out channels, pool after?)
ARCHITECTURE = (
    ("conv1_1", "relu1_1", 3, 16, False),
    ("conv1_2", "relu1_2", 16, 16, True),
    ("conv2_1", "relu2_1", 16, 32, False),
    ("conv2_2", "relu2_2", 32, 32, True),
    ("conv3_1", "relu3_1", 32, 64, False),
)

LAYER_NAMES = tuple(relu for _, relu, _, _, _ in ARCHITECTURE)

DEFAULT_STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1")
DEFAULT_CONTENT_LAYERS = ("relu2_2",)

ARCH_TAG = "pvst-small-v1"

_MAGIC = b"PVST"
_VERSION = 1


class WeightsFormatError(PVStyleError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    name: str
    kernel: np.ndarray  # (outC, inC, 3, 3)
    bias: np.ndarray  # (outC,)


@dataclass(frozen=True)
class NetworkWeights:
    layers: tuple  # of ConvLayer, in architecture order
    arch: str = ARCH_TAG


@dataclass(frozen=True)
class ActivationSet:
    """Requested activations plus the saved state needed for backward."""

    activations: dict  # relu name -> (C, H, W) feature map
    tape: tuple  # forward op records, internal to this module
    input_shape: tuple  # (H, W)


def _check_chain(layers):
    expect_in = 3
    for layer, (conv_name, _, in_c, out_c, _) in zip(layers, ARCHITECTURE):
        k, b = layer.kernel, layer.bias
        if k.shape != (out_c, in_c, 3, 3):
            raise WeightsFormatError(
                f"layer {layer.name}: kernel shape {k.shape}, "
                f"expected {(out_c, in_c, 3, 3)}")
        if b.shape != (out_c,):
            raise WeightsFormatError(
                f"layer {layer.name}: bias shape {b.shape}, expected ({out_c},)")
        if k.shape[1] != expect_in:
            raise WeightsFormatError(
                f"layer {layer.name}: input channels {k.shape[1]} do not "
                f"chain from previous output {expect_in}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
            raise WeightsFormatError(f"layer {layer.name}: non-finite values")
        expect_in = out_c


def seeded_weights(seed):
    """Deterministic He-scaled weights, identical across platforms.

    A SplitMix64 chain derived from ``seed`` feeds numpy's PCG64 stream;
    kernels are N(0, 2/(9*inC)), biases zero.
    """
    mask = 0xFFFFFFFFFFFFFFFF
    state = int(seed) & mask

    def splitmix64():
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        return z ^ (z >> 31)

    layers = []
    for conv_name, _, in_c, out_c, _ in ARCHITECTURE:
        rng = np.random.Generator(np.random.PCG64(splitmix64()))
        std = np.sqrt(2.0 / (9.0 * in_c))
        kernel = rng.standard_normal((out_c, in_c, 3, 3)) * std
        bias = np.zeros(out_c)
        layers.append(ConvLayer(conv_name, kernel, bias))
    return NetworkWeights(tuple(layers))


def save_weights(w, path):
    """Write weights in the PVST little-endian binary format."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(w.layers)))
        for layer in w.layers:
            name = layer.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<IIII", *layer.kernel.shape))
            f.write(layer.kernel.astype("<f4").tobytes())
            f.write(struct.pack("<I", layer.bias.shape[0]))
            f.write(layer.bias.astype("<f4").tobytes())


def load_weights(path):
    """Read a PVST weights file; values reconstruct bit-exactly."""
    with open(path, "rb") as f:
        data = f.read()

    def take(n, what):
        nonlocal offset
        if offset + n > len(data):
            raise WeightsFormatError(f"{path}: truncated file reading {what}")
        chunk = data[offset:offset + n]
        offset = offset + n
        return chunk

    offset = 0
    if take(4, "magic") != _MAGIC:
        raise WeightsFormatError(f"{path}: bad magic (not a PVST file)")
    version, n_layers = struct.unpack("<II", take(8, "header"))
    if version != _VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    if n_layers != len(ARCHITECTURE):
        raise WeightsFormatError(
            f"{path}: {n_layers} layers, architecture has {len(ARCHITECTURE)}")
    layers = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dims = struct.unpack("<IIII", take(16, "kernel dims"))
        kernel = np.frombuffer(
            take(4 * int(np.prod(dims)), "kernel data"), dtype="<f4"
        ).reshape(dims).astype(np.float64)
        (bias_len,) = struct.unpack("<I", take(4, "bias length"))
        bias = np.frombuffer(take(4 * bias_len, "bias data"), dtype="<f4").astype(np.float64)
        layers.append(ConvLayer(name, kernel, bias))
    try:
        _check_chain(layers)
    except WeightsFormatError as e:
        raise WeightsFormatError(f"{path}: {e}") from None
    return NetworkWeights(tuple(layers))


def _reflect_pad(x):
    # (C, H, W) -> (C, H+2, W+2), mirror without edge repetition
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")


def _reflect_pad_adjoint(gp):
    # Adjoint of _reflect_pad: fold border gradients onto mirrored positions.
    g = gp[:, 1:-1, 1:-1].copy()
    g[:, 1, :] += gp[:, 0, 1:-1]
    g[:, -2, :] += gp[:, -1, 1:-1]
    g[:, :, 1] += gp[:, 1:-1, 0]
    g[:, :, -2] += gp[:, 1:-1, -1]
    g[:, 1, 1] += gp[:, 0, 0]
    g[:, 1, -2] += gp[:, 0, -1]
    g[:, -2, 1] += gp[:, -1, 0]
    g[:, -2, -2] += gp[:, -1, -1]
    return g


def _conv_forward(x, kernel, bias):
    padded = _reflect_pad(x)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    out = np.einsum("ockl,chwkl->ohw", kernel, win, optimize=True)
    return out + bias[:, None, None]


def _conv_backward(g, x_shape, kernel):
    _, h, w = x_shape
    gp = np.zeros((kernel.shape[1], h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            gp[:, ky:ky + h, kx:kx + w] += np.tensordot(
                kernel[:, :, ky, kx], g, axes=(0, 0))
    return _reflect_pad_adjoint(gp)


def _pool_forward(x):
    _, h, w = x.shape
    h2, w2 = h // 2, w // 2
    t = x[:, :2 * h2, :2 * w2]
    return 0.25 * (t[:, 0::2, 0::2] + t[:, 0::2, 1::2]
                   + t[:, 1::2, 0::2] + t[:, 1::2, 1::2])


def _pool_backward(g, x_shape):
    gx = np.zeros(x_shape)
    h2, w2 = g.shape[1], g.shape[2]
    spread = 0.25 * g
    gx[:, 0:2 * h2:2, 0:2 * w2:2] = spread
    gx[:, 0:2 * h2:2, 1:2 * w2:2] = spread
    gx[:, 1:2 * h2:2, 0:2 * w2:2] = spread
    gx[:, 1:2 * h2:2, 1:2 * w2:2] = spread
    return gx


def forward(w, img, wanted=None):
    """Run the network on an (H, W, 3) image; keep state for backward.

    ``wanted`` limits the activations exposed in the result; the full tape
    is always retained.  Raises on unknown layer names or images smaller
    than 8x8 (the two pools need at least that).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w_px = img.shape[:2]
    if h < 8 or w_px < 8:
        raise ValueError(f"image {h}x{w_px} too small, need at least 8x8")
    if wanted is None:
        wanted = LAYER_NAMES
    unknown = set(wanted) - set(LAYER_NAMES)
    if unknown:
        raise ValueError(f"unknown layer name(s): {sorted(unknown)}")

    x = np.ascontiguousarray(img.transpose(2, 0, 1))
    tape = []
    activations = {}
    for layer, (conv_name, relu_name, _, _, pooled) in zip(w.layers, ARCHITECTURE):
        pre = _conv_forward(x, layer.kernel, layer.bias)
        tape.append(("conv", x.shape, layer.kernel))
        x = np.maximum(pre, 0.0)
        tape.append(("relu", pre > 0.0, None))
        activations[relu_name] = x
        if pooled:
            tape.append(("pool", x.shape, None))
            x = _pool_forward(x)
    out = {name: activations[name] for name in wanted}
    return ActivationSet(out, tuple(tape), (h, w_px))


def backward(w, acts, upstream):
    """Vector-Jacobian product: push per-layer gradients back to pixels.

    Returns d(total)/d(pixels) as an (H, W, 3) array; linear in the
    upstream gradients.
    """
    unknown = set(upstream) - set(LAYER_NAMES)
    if unknown:
        raise ValueError(f"unknown layer name(s) in upstream: {sorted(unknown)}")
    full = {}
    tape = list(acts.tape)
    # relu tape entries appear in architecture order
    relu_positions = [i for i, rec in enumerate(tape) if rec[0] == "relu"]
    for name, pos in zip(LAYER_NAMES, relu_positions):
        full[pos] = upstream.get(name)
        if full[pos] is not None:
            expected = tape[pos][1].shape
            if np.shape(full[pos]) != expected:
                raise ValueError(
                    f"upstream gradient for {name} has shape "
                    f"{np.shape(full[pos])}, expected {expected}")

    g = None
    for i in range(len(tape) - 1, -1, -1):
        kind, saved, kernel = tape[i]
        if kind == "relu" and full.get(i) is not None:
            g = full[i] if g is None else g + full[i]
        if g is None:
            continue
        if kind == "relu":
            g = g * saved
        elif kind == "conv":
            g = _conv_backward(g, saved, kernel)
        elif kind == "pool":
            g = _pool_backward(g, saved)
    if g is None:
        h, w_px = acts.input_shape
        return np.zeros((h, w_px, 3))
    return g.transpose(1, 2, 0)


def layer_shape(input_hw, name):
    """Spatial (H, W) of a named activation for a given input size."""
    h, w = input_hw
    for _, relu_name, _, _, pooled in ARCHITECTURE:
        if relu_name == name:
            return (h, w)
        if pooled:
            h, w = h // 2, w // 2
    raise ValueError(f"unknown layer name: {name}")


def layer_channels(name):
    for _, relu_name, _, out_c, _ in ARCHITECTURE:
        if relu_name == name:
            return out_c
    raise ValueError(f"unknown layer name: {name}")
