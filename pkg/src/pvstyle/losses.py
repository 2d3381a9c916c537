"""Loss terms for photorealistic video stylization, each with its gradient.

Terms: feature-space content loss, segmentation-aware Gram style loss,
Matting-Laplacian photorealism penalty, and flow-warped temporal penalties
(short-term, and long-term over a gap set J with de-duplicated weights).
The total is

    content + tau * style + lambda * photorealism + gamma * sum(temporal_j)

with per-layer weights alpha_l (content) and beta_l (style).  Gradients
are analytic throughout and feature-space contributions are pushed to
pixel space through the extractor's backward pass.
"""

from dataclasses import dataclass, field

import numpy as np

from . import features, matting


@dataclass(frozen=True)
class LossWeights:
    """Term and per-layer weights plus the long-term gap set J."""

    content: dict = None  # layer -> alpha_l
    style: dict = None  # layer -> beta_l
    tau: float = 10.0
    gamma: float = 200.0
    lam: float = 1.0
    gaps: tuple = (1, 2, 4)  # J

    def __post_init__(self):
        if self.content is None:
            object.__setattr__(
                self, "content", {l: 1.0 for l in features.DEFAULT_CONTENT_LAYERS})
        if self.style is None:
            object.__setattr__(
                self, "style", {l: 1.0 for l in features.DEFAULT_STYLE_LAYERS})
        for name, value in (("tau", self.tau), ("gamma", self.gamma), ("lam", self.lam)):
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        gaps = tuple(sorted(set(int(j) for j in self.gaps)))
        if gaps and gaps[0] < 1:
            raise ValueError(f"gap set entries must be >= 1, got {self.gaps}")
        object.__setattr__(self, "gaps", gaps)


@dataclass(frozen=True)
class StyleTargets:
    """Per (layer, channel) Gram matrices of the masked style features."""

    grams: dict  # (layer, channel index) -> (C_l, C_l) array
    channels: tuple  # usable channel indices, ascending


def masked_gram(feat, mask):
    """Gram of mask-scaled features: G = F~ F~^T, F~ = feat * mask.

    No normalization here; the loss applies 1/(2 N^2) itself.
    """
    feat = np.asarray(feat, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if feat.shape[1:] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match feature grid {feat.shape[1:]}")
    scaled = (feat * mask).reshape(feat.shape[0], -1)
    return scaled @ scaled.T


def content_loss(acts_out, acts_ref, alpha):
    """Size-normalized squared feature error; returns per-layer grads."""
    value = 0.0
    grads = {}
    for layer, weight in alpha.items():
        f_out = acts_out.activations[layer]
        f_ref = acts_ref.activations[layer]
        if f_out.shape != f_ref.shape:
            raise ValueError(
                f"layer {layer}: shapes {f_out.shape} vs {f_ref.shape} differ")
        n = f_out.size
        diff = f_out - f_ref
        value += weight * 0.5 / n * np.sum(diff * diff)
        grads[layer] = (weight / n) * diff
    return value, grads


def style_targets(acts_style, style_masks, usable=None):
    """Masked Grams of the style image per (layer, channel).

    ``style_masks`` maps each style layer to a MaskStack at that layer's
    resolution.  Channels flagged unusable (or with zero mask mass on the
    style side) are omitted.
    """
    grams = {}
    channels = set()
    for layer, stack in style_masks.items():
        if layer not in acts_style.activations:
            raise ValueError(f"no activations for style layer {layer}")
        feat = acts_style.activations[layer]
        for c in range(stack.channels):
            if usable is not None and not usable[c]:
                continue
            mask = stack.weights[c]
            if np.sum(mask) <= 0:
                continue
            grams[(layer, c)] = masked_gram(feat, mask)
            channels.add(c)
    return StyleTargets(grams, tuple(sorted(channels)))


def segmented_style_loss(acts_out, out_masks, targets, beta, tau,
                         style_norm="mask_mass"):
    """Per-channel Gram matching against the style targets.

    Normalization 1/(2 N^2) uses N = C_l * (mask mass at the layer) by
    default; ``style_norm='channels'`` uses the literal N = C_l.
    """
    if style_norm not in ("mask_mass", "channels"):
        raise ValueError(f"unknown style_norm {style_norm!r}")
    value = 0.0
    grads = {}
    for layer, weight in beta.items():
        feat = acts_out.activations[layer]
        c_l = feat.shape[0]
        flat = feat.reshape(c_l, -1)
        d_flat = np.zeros_like(flat)
        stack = out_masks[layer]
        for c in targets.channels:
            if (layer, c) not in targets.grams:
                continue
            if c >= stack.channels:
                raise ValueError(
                    f"target channel {c} missing from output masks at {layer}")
            mask = stack.weights[c].ravel()
            mass = float(np.sum(mask))
            if mass <= 0:
                continue
            n = c_l * mass if style_norm == "mask_mass" else float(c_l)
            scaled = flat * mask
            delta = scaled @ scaled.T - targets.grams[(layer, c)]
            value += tau * weight / (2.0 * n * n) * np.sum(delta * delta)
            # d||dG||^2/dF~ = 4 dG F~; chain back through the mask scaling
            d_flat += tau * weight * (2.0 / (n * n)) * (delta @ scaled) * mask
        grads[layer] = d_flat.reshape(feat.shape)
    return value, grads


def temporal_loss(img, warped, weights):
    """Per-pixel weighted mean squared error against the warped reference."""
    img = np.asarray(img, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if img.shape != warped.shape or img.shape[:2] != weights.shape:
        raise ValueError(
            f"shape mismatch: image {img.shape}, warped {warped.shape}, "
            f"weights {weights.shape}")
    d = img.size  # 3*H*W
    diff = img - warped
    wdiff = weights[:, :, None] * diff
    value = float(np.sum(wdiff * diff)) / d
    grad = (2.0 / d) * wdiff
    return value, grad


def long_term_weights(weight_maps):
    """De-duplicate consistency weights across gaps, nearest frame first.

    Input is ordered by ascending gap j; output j gets
    max(c_j - sum of all nearer c_k, 0) per pixel, so each pixel is
    constrained only by its nearest traceable ancestor.
    """
    out = []
    claimed = None
    for c in weight_maps:
        c = np.asarray(c, dtype=np.float64)
        if claimed is None:
            out.append(c.copy())
            claimed = c.copy()
        else:
            if c.shape != claimed.shape:
                raise ValueError("weight maps have differing shapes")
            out.append(np.maximum(c - claimed, 0.0))
            claimed = claimed + c
    return out


@dataclass
class FrameLossContext:
    """Everything besides the output image that the total loss reads."""

    content_acts: object  # ActivationSet of the content frame
    targets: StyleTargets
    out_masks: dict  # style layer -> MaskStack at layer resolution
    laplacian: object = None  # sparse matting Laplacian, or None
    temporal: list = field(default_factory=list)  # (warped image, weights)
    style_norm: str = "mask_mass"


def total_loss(img, ctx, weights, net):
    """Full objective: value, pixel gradient, and a per-term breakdown."""
    wanted = tuple(dict.fromkeys(list(weights.content) + list(weights.style)))
    acts = features.forward(net, img, wanted)

    c_value, c_grads = content_loss(acts, ctx.content_acts, weights.content)
    s_value, s_grads = segmented_style_loss(
        acts, ctx.out_masks, ctx.targets, weights.style, weights.tau,
        ctx.style_norm)

    upstream = dict(c_grads)
    for layer, g in s_grads.items():
        upstream[layer] = upstream.get(layer, 0) + g
    grad = features.backward(net, acts, upstream)

    p_value = 0.0
    if ctx.laplacian is not None and weights.lam > 0:
        p_value, p_grad = matting.photorealism_loss(ctx.laplacian, img)
        grad = grad + weights.lam * p_grad

    t_value = 0.0
    for warped, c in ctx.temporal:
        tv, tg = temporal_loss(img, warped, c)
        t_value += tv
        if weights.gamma > 0:
            grad = grad + weights.gamma * tg

    terms = {
        "content": c_value,
        "style": s_value,
        "photorealism": p_value,
        "temporal": t_value,
    }
    value = c_value + s_value + weights.lam * p_value + weights.gamma * t_value
    return value, grad, terms
