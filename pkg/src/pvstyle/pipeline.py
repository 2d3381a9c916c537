"""Per-frame orchestration of video stylization.

Frames are processed strictly in ascending order.  Frame 0 starts from
its content frame; frame i > 0 starts from the previous stylized output
warped forward, with content filling the invalid regions.  Temporal terms
are built for every gap j in J with i - j inside the range, using
de-duplicated long-term weights.  Each run writes ``styled_%05d.png``
outputs plus a ``run.json`` manifest that fully determines reproduction.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, asdict, replace

import numpy as np
import scipy.sparse

from . import PVStyleError, features, flow, imaging, losses, matting, \
    optimize, segmentation

log = logging.getLogger("pvstyle")


class PipelineError(PVStyleError):
    pass


@dataclass(frozen=True)
class JobConfig:
    """Flat run configuration; mirrors the config-file keys one to one."""

    content_dir: str = ""
    style: str = ""
    out_dir: str = ""
    seg_dir: str = ""  # empty: no segmentation, single all-ones channel
    style_seg: str = ""
    flow_dir: str = ""  # empty: no temporal terms
    weights: str = ""  # empty: seeded extractor weights
    seed: int = 0
    frame_start: int = 0
    frame_count: int = 1
    content_layers: tuple = features.DEFAULT_CONTENT_LAYERS
    style_layers: tuple = features.DEFAULT_STYLE_LAYERS
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 10.0
    gamma: float = 200.0
    lam: float = 1.0
    gaps: tuple = (1, 2, 4)
    style_norm: str = "mask_mass"
    eps: float = 1e-5
    radius: int = 1
    disocc_rel: float = flow.DISOCC_REL
    disocc_abs: float = flow.DISOCC_ABS
    motion_rel: float = flow.MOTION_REL
    motion_abs: float = flow.MOTION_ABS
    method: str = "adam"
    step: float = 0.02
    iterations_first: int = 500
    iterations_rest: int = 300
    tolerance: float = 1e-6

    def loss_weights(self):
        return losses.LossWeights(
            content={l: self.alpha for l in self.content_layers},
            style={l: self.beta for l in self.style_layers},
            tau=self.tau, gamma=self.gamma, lam=self.lam, gaps=self.gaps)

    def optimizer_params(self, iterations):
        return optimize.OptimizerParams(
            method=self.method, step=self.step, iterations=iterations,
            tolerance=self.tolerance)

    def to_dict(self):
        """External (config-file) representation; keys match the file format."""
        d = asdict(self)
        d["content_layers"] = ",".join(self.content_layers)
        d["style_layers"] = ",".join(self.style_layers)
        d["J"] = ",".join(str(j) for j in self.gaps)
        d["lambda"] = d.pop("lam")
        del d["gaps"]
        return d

    def validate(self):
        if self.frame_count < 1:
            raise PipelineError("frame range is empty")
        for key in ("content_dir", "style"):
            if not getattr(self, key):
                raise PipelineError(f"config key {key} is required")
        for key in ("content_dir", "style", "seg_dir", "style_seg",
                    "flow_dir", "weights"):
            path = getattr(self, key)
            if path and not os.path.exists(path):
                raise PipelineError(f"{key}: {path} does not exist")


def validate_inputs(cfg):
    """Check that every per-frame input file for the range exists.

    Runs before any output is written so validation failures leave the
    output directory untouched.
    """
    missing = []
    first = cfg.frame_start
    for index in range(first, first + cfg.frame_count):
        candidates = [imaging.frame_path(cfg.content_dir, index)]
        if cfg.seg_dir:
            candidates.append(_frame_seg_path(cfg, index))
        if cfg.flow_dir and index > first:
            for j in cfg.gaps:
                if index - j >= first:
                    candidates.append(flow.backward_flow_path(cfg.flow_dir, index, j))
                    candidates.append(flow.forward_flow_path(cfg.flow_dir, index, j))
        missing.extend(p for p in candidates if not os.path.exists(p))
    if cfg.seg_dir and not cfg.style_seg:
        raise PipelineError("seg_dir is set but style_seg is not")
    if missing:
        raise PipelineError("missing input file(s): " + ", ".join(missing))


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


_STR_KEYS = {"content_dir", "style", "out_dir", "seg_dir", "style_seg",
             "flow_dir", "weights", "style_norm", "method"}
_INT_KEYS = {"seed", "frame_start", "frame_count", "radius",
             "iterations_first", "iterations_rest"}
_FLOAT_KEYS = {"alpha", "beta", "tau", "gamma", "lambda", "eps",
               "disocc_rel", "disocc_abs", "motion_rel", "motion_abs",
               "step", "tolerance"}
_LIST_KEYS = {"content_layers", "style_layers", "J"}

CONFIG_KEYS = _STR_KEYS | _INT_KEYS | _FLOAT_KEYS | _LIST_KEYS


def config_from_dict(values):
    """Build a JobConfig from external key/value pairs (strings allowed).

    Unknown keys and malformed values are errors naming the key.
    """
    kwargs = {}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise PipelineError(f"unknown config key {key!r}")
        try:
            if key in _STR_KEYS:
                kwargs[key] = str(value)
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs["lam" if key == "lambda" else key] = float(value)
            else:
                if isinstance(value, str):
                    parts = [p.strip() for p in value.split(",") if p.strip()]
                else:
                    parts = list(value)
                if key == "J":
                    kwargs["gaps"] = tuple(int(p) for p in parts)
                else:
                    kwargs[key] = tuple(str(p) for p in parts)
        except (TypeError, ValueError):
            raise PipelineError(
                f"config key {key!r}: cannot parse value {value!r}") from None
    try:
        return JobConfig(**kwargs)
    except ValueError as e:
        raise PipelineError(str(e)) from None


def stylize_single(cfg, content_path, out_path):
    """Single-image stylization: no temporal terms, single all-ones mask."""
    cfg = replace(cfg, seg_dir="", style_seg="")
    net = load_network(cfg)
    content = imaging.load_image(content_path)
    style_img = imaging.load_image(cfg.style)
    targets, _ = build_style_targets(cfg, net, style_img)
    acts = features.forward(net, content, cfg.content_layers)
    stack = segmentation.trivial_masks(*content.shape[:2])
    out_masks = _layer_masks(stack, content.shape[:2], cfg.style_layers)
    laplacian = matting.build_matting_laplacian(
        content, cfg.eps, cfg.radius) if cfg.lam > 0 else None
    loss_ctx = losses.FrameLossContext(
        content_acts=acts, targets=targets, out_masks=out_masks,
        laplacian=laplacian, style_norm=cfg.style_norm)
    ctx = FrameContext(0, content, loss_ctx, content.copy())
    result, trace = stylize_frame(ctx, cfg, net, cfg.iterations_first)
    imaging.save_image(result, out_path)
    return trace


@dataclass
class FrameContext:
    """Assembled inputs for stylizing one frame."""

    index: int
    content: np.ndarray
    loss_ctx: losses.FrameLossContext
    init: np.ndarray
    temporal_gaps: tuple = ()


def load_network(cfg):
    if cfg.weights:
        return features.load_weights(cfg.weights)
    return features.seeded_weights(cfg.seed)


def _cached_laplacian(img, cfg):
    cache_dir = os.path.join(cfg.out_dir, "cache")
    key = hashlib.sha256(
        img.tobytes() + f"|{cfg.eps}|{cfg.radius}".encode()).hexdigest()
    path = os.path.join(cache_dir, f"lap_{key}.npz")
    if os.path.exists(path):
        with np.load(path) as z:
            return scipy.sparse.csr_matrix(
                (z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
    lap = matting.build_matting_laplacian(img, cfg.eps, cfg.radius)
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(path, data=lap.data, indices=lap.indices, indptr=lap.indptr,
             shape=np.asarray(lap.shape))
    return lap


def _layer_masks(stack, hw, layers):
    """Downsample one mask stack to every requested layer resolution."""
    return {name: segmentation.downsample_masks(
        stack, *features.layer_shape(hw, name)) for name in layers}


def _frame_seg_path(cfg, index):
    return os.path.join(cfg.seg_dir, f"frame_{index:05d}_seg.png")


def build_style_targets(cfg, net, style_img, content_labels=None):
    """Style activations + masked Grams under the shared vocabulary."""
    hw = style_img.shape[:2]
    acts = features.forward(net, style_img, cfg.style_layers)
    if cfg.seg_dir and cfg.style_seg:
        style_labels = segmentation.load_label_map(cfg.style_seg)
        if style_labels.shape != hw:
            raise PipelineError(
                "style segmentation size does not match the style image")
        if content_labels is None:
            content_labels = style_labels
        vocab, usable = segmentation.common_vocabulary(content_labels, style_labels)
        stack = segmentation.masks_from_labels(style_labels, vocab)
    else:
        vocab, usable = (0,), (True,)
        stack = segmentation.trivial_masks(*hw)
    masks = _layer_masks(stack, hw, cfg.style_layers)
    return losses.style_targets(acts, masks, usable), vocab


def build_frame_context(cfg, net, index, targets, vocab, prev_outputs):
    """Gather content features, masks, Laplacian, and temporal terms.

    ``prev_outputs`` maps already-stylized frame indices to their images.
    """
    content = imaging.load_image(imaging.frame_path(cfg.content_dir, index))
    hw = content.shape[:2]
    acts = features.forward(net, content, cfg.content_layers)

    if cfg.seg_dir:
        labels = segmentation.load_label_map(_frame_seg_path(cfg, index))
        stack = segmentation.masks_from_labels(labels, vocab)
    else:
        stack = segmentation.trivial_masks(*hw)
    out_masks = _layer_masks(stack, hw, cfg.style_layers)

    laplacian = _cached_laplacian(content, cfg) if cfg.lam > 0 else None

    temporal = []
    temporal_gaps = []
    init = content.copy()
    if cfg.flow_dir and index > cfg.frame_start:
        raw = []
        for j in cfg.gaps:
            ref = index - j
            if ref < cfg.frame_start:
                continue
            back = flow.read_flo(flow.backward_flow_path(cfg.flow_dir, index, j))
            fwd = flow.read_flo(flow.forward_flow_path(cfg.flow_dir, index, j))
            warped, valid = flow.backward_warp(prev_outputs[ref], back)
            c = flow.consistency_weights(
                fwd, back, cfg.disocc_rel, cfg.disocc_abs,
                cfg.motion_rel, cfg.motion_abs) * valid
            raw.append((j, warped, c, valid))
        if raw:
            dedup = losses.long_term_weights([c for _, _, c, _ in raw])
            for (j, warped, _, _), c_long in zip(raw, dedup):
                temporal.append((warped, c_long))
                temporal_gaps.append(j)
            # warm start from the nearest stylized ancestor
            j0, warped0, _, valid0 = raw[0]
            v = valid0[:, :, None]
            init = v * warped0 + (1 - v) * content

    loss_ctx = losses.FrameLossContext(
        content_acts=acts, targets=targets, out_masks=out_masks,
        laplacian=laplacian, temporal=temporal, style_norm=cfg.style_norm)
    return FrameContext(index, content, loss_ctx, init, tuple(temporal_gaps))


def stylize_frame(ctx, cfg, net, iterations):
    """Minimize the total loss for one frame from the context's init."""
    weights = cfg.loss_weights()

    def objective(img):
        return losses.total_loss(img, ctx.loss_ctx, weights, net)

    try:
        return optimize.minimize(
            objective, ctx.init, cfg.optimizer_params(iterations))
    except PVStyleError as e:
        raise PipelineError(f"frame {ctx.index}: {e}") from e


def stylize_sequence(cfg):
    """Stylize the configured frame range; returns output paths.

    The manifest ``run.json`` in the output directory records the resolved
    config, per-frame iterations and final losses, and the temporal error
    of the produced sequence; it is rewritten after every frame so a
    failed run records the last completed index.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    net = load_network(cfg)
    style_img = imaging.load_image(cfg.style)

    first = cfg.frame_start
    content_labels = None
    if cfg.seg_dir:
        content_labels = segmentation.load_label_map(_frame_seg_path(cfg, first))
    targets, vocab = build_style_targets(cfg, net, style_img, content_labels)

    manifest = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "frames": [],
        "last_completed": None,
    }
    manifest_path = os.path.join(cfg.out_dir, "run.json")

    outputs = {}
    paths = []
    for index in range(first, first + cfg.frame_count):
        try:
            ctx = build_frame_context(cfg, net, index, targets, vocab, outputs)
            iterations = cfg.iterations_first if index == first else cfg.iterations_rest
            result, trace = stylize_frame(ctx, cfg, net, iterations)
        except PVStyleError as e:
            _write_manifest(manifest_path, manifest)
            raise PipelineError(f"frame {index}: {e}") from e
        out_path = os.path.join(cfg.out_dir, f"styled_{index:05d}.png")
        imaging.save_image(result, out_path)
        outputs[index] = result
        paths.append(out_path)
        manifest["frames"].append({
            "index": index,
            "iterations": trace.iterations,
            "stop_reason": trace.stop_reason,
            "temporal_terms": len(ctx.temporal_gaps),
            "temporal_gaps": list(ctx.temporal_gaps),
            "final_terms": trace.terms[-1] if trace.terms else {},
            "final_loss": trace.losses[-1] if trace.losses else None,
        })
        manifest["last_completed"] = index
        _write_manifest(manifest_path, manifest)
        log.info("frame %d done: loss %.6g after %d iterations",
                 index, trace.losses[-1], trace.iterations)

    if cfg.flow_dir and cfg.frame_count > 1:
        frames = [outputs[i] for i in range(first, first + cfg.frame_count)]
        flows, weight_maps = [], []
        for i in range(first + 1, first + cfg.frame_count):
            back = flow.read_flo(flow.backward_flow_path(cfg.flow_dir, i, 1))
            fwd = flow.read_flo(flow.forward_flow_path(cfg.flow_dir, i, 1))
            flows.append(back)
            weight_maps.append(flow.consistency_weights(
                fwd, back, cfg.disocc_rel, cfg.disocc_abs,
                cfg.motion_rel, cfg.motion_abs))
        manifest["temporal_error"] = temporal_error(frames, flows, weight_maps)
        _write_manifest(manifest_path, manifest)
    return paths


def _write_manifest(path, manifest):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def gradient_check_fixture(seed=0, size=8):
    """Deterministic small instance exercising every loss term."""
    rng = np.random.Generator(np.random.PCG64(seed))
    net = features.seeded_weights(seed)
    content = rng.random((size, size, 3))
    style_img = rng.random((size, size, 3))
    point = rng.random((size, size, 3))
    warped = rng.random((size, size, 3))
    temporal_w = rng.random((size, size))

    style_layers = features.DEFAULT_STYLE_LAYERS
    acts_style = features.forward(net, style_img, style_layers)
    stack = segmentation.trivial_masks(size, size)
    masks = _layer_masks(stack, (size, size), style_layers)
    targets = losses.style_targets(acts_style, masks)
    ctx = losses.FrameLossContext(
        content_acts=features.forward(net, content, features.DEFAULT_CONTENT_LAYERS),
        targets=targets,
        out_masks=masks,
        laplacian=matting.build_matting_laplacian(content, 1e-5, 1),
        temporal=[(warped, temporal_w)])
    return net, ctx, point


def gradient_check_suite(seed=0, size=8, step=1e-4):
    """Finite-difference check of every loss term and the total.

    Returns a dict term -> max relative error over sampled coordinates.
    """
    net, ctx, point = gradient_check_fixture(seed, size)
    zeros = {l: 0.0 for l in features.DEFAULT_STYLE_LAYERS}
    configs = {
        "content": losses.LossWeights(style=zeros, tau=0, gamma=0, lam=0),
        "style": losses.LossWeights(content={"relu2_2": 0.0}, tau=10, gamma=0, lam=0),
        "photorealism": losses.LossWeights(
            content={"relu2_2": 0.0}, style=zeros, tau=0, gamma=0, lam=100),
        "temporal": losses.LossWeights(
            content={"relu2_2": 0.0}, style=zeros, tau=0, gamma=200, lam=0),
        "total": losses.LossWeights(),
    }
    results = {}
    for term, weights in configs.items():
        def objective(img, weights=weights):
            return losses.total_loss(img, ctx, weights, net)
        results[term] = optimize.finite_diff_check(objective, point.copy(), step)
    return results


def temporal_error(frames, flows, weight_maps):
    """Weighted mean squared warp error over consecutive frame pairs.

    Per pair, the squared pixel difference (summed over channels) against
    the warped predecessor is averaged with the given weights (multiplied
    by warp validity); pairs with zero total weight are skipped.  Returns
    0 with a logged warning when every pair is vacuous.
    """
    if len(flows) != len(frames) - 1 or len(weight_maps) != len(flows):
        raise ValueError(
            f"expected {len(frames) - 1} flows/weights, got "
            f"{len(flows)} flows and {len(weight_maps)} weight maps")
    errors = []
    for k, (back, weights) in enumerate(zip(flows, weight_maps)):
        warped, valid = flow.backward_warp(frames[k], back)
        w = np.asarray(weights, dtype=np.float64) * valid
        total = float(np.sum(w))
        if total <= 0:
            continue
        diff = frames[k + 1] - warped
        errors.append(float(np.sum(w[:, :, None] * diff * diff)) / total)
    if not errors:
        log.warning("temporal_error: all pairs had zero weight; returning 0")
        return 0.0
    return float(np.mean(errors))
