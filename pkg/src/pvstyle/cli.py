"""Command-line interface.

Subcommands: stylize, stylize-video, gradcheck, laplacian, metrics, flow.
Configuration precedence is flags over config-file values over built-in
defaults; config files are flat ``key = value`` text whose keys mirror the
job configuration.  stdout carries only machine-readable results; all
diagnostics go to stderr.  Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

import argparse
import glob
import json
import logging
import os
import re
import sys

import numpy as np

from . import PVStyleError, flow, imaging, matting, optimize, pipeline


class CLIError(Exception):
    """Validation-stage error; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{message}\n(run '{self.prog} --help' for usage)")


# flags that overlay config-file keys, (flag, external key)
_CONFIG_FLAGS = [
    ("--content-dir", "content_dir"), ("--style", "style"),
    ("--out-dir", "out_dir"), ("--seg-dir", "seg_dir"),
    ("--style-seg", "style_seg"), ("--flow-dir", "flow_dir"),
    ("--weights", "weights"), ("--seed", "seed"),
    ("--frame-start", "frame_start"), ("--frame-count", "frame_count"),
    ("--content-layers", "content_layers"), ("--style-layers", "style_layers"),
    ("--alpha", "alpha"), ("--beta", "beta"), ("--tau", "tau"),
    ("--gamma", "gamma"), ("--lambda", "lambda"), ("--J", "J"),
    ("--style-norm", "style_norm"), ("--eps", "eps"), ("--radius", "radius"),
    ("--disocc-rel", "disocc_rel"), ("--disocc-abs", "disocc_abs"),
    ("--motion-rel", "motion_rel"), ("--motion-abs", "motion_abs"),
    ("--method", "method"), ("--step", "step"),
    ("--iterations-first", "iterations_first"),
    ("--iterations-rest", "iterations_rest"), ("--tolerance", "tolerance"),
]


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    for flag, key in _CONFIG_FLAGS:
        parser.add_argument(flag, dest=f"cfg_{key}", metavar="V")


def parse_config_file(path):
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise CLIError(f"--config: cannot read {path} ({e})")
    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(args, base=None):
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for _, key in _CONFIG_FLAGS:
        flag_value = getattr(args, f"cfg_{key}", None)
        if flag_value is not None:
            values[key] = flag_value
    try:
        return pipeline.config_from_dict(values)
    except pipeline.PipelineError as e:
        raise CLIError(str(e)) from None


def _print_config(cfg):
    for key, value in sorted(cfg.to_dict().items()):
        print(f"{key} = {value}")


def cmd_stylize(args):
    cfg = resolve_config(args)
    if args.print_config:
        _print_config(cfg)
        return 0
    if not args.content or not args.out:
        raise CLIError("stylize requires --content and --out")
    if not os.path.exists(args.content):
        raise CLIError(f"--content: {args.content} does not exist")
    if not cfg.style:
        raise CLIError("stylize requires --style (or a config with one)")
    if not os.path.exists(cfg.style):
        raise CLIError(f"--style: {cfg.style} does not exist")
    trace = pipeline.stylize_single(cfg, args.content, args.out)
    if args.trace:
        optimize.trace_csv(trace, args.trace)
    print(args.out)
    return 0


def cmd_stylize_video(args):
    base = None
    if args.manifest:
        try:
            with open(args.manifest) as f:
                base = json.load(f)["config"]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise CLIError(f"--manifest: cannot load {args.manifest} ({e})")
    cfg = resolve_config(args, base)
    if args.print_config:
        _print_config(cfg)
        return 0
    try:
        cfg.validate()
        pipeline.validate_inputs(cfg)
    except pipeline.PipelineError as e:
        raise CLIError(str(e)) from None
    for path in pipeline.stylize_sequence(cfg):
        print(path)
    return 0


def cmd_gradcheck(args):
    results = pipeline.gradient_check_suite(args.seed, args.size, args.step)
    failed = False
    for term, err in results.items():
        print(f"{term} {err:.6g}")
        if err > args.threshold:
            failed = True
            logging.error("gradcheck: %s exceeds threshold %.3g (%.3g)",
                          term, args.threshold, err)
    return 1 if failed else 0


def cmd_laplacian(args):
    if not os.path.exists(args.input):
        raise CLIError(f"--input: {args.input} does not exist")
    img = imaging.load_image(args.input)
    lap = matting.build_matting_laplacian(img, args.eps, args.radius)
    matting.dump_triplets(lap, args.out)
    print(args.out)
    return 0


def cmd_metrics(args):
    paths = sorted(glob.glob(os.path.join(args.frames, "*.png")))
    if len(paths) < 2:
        raise CLIError(f"--frames: need at least 2 frames in {args.frames}")
    frames = [imaging.load_image(p) for p in paths]
    indices = []
    for p in paths:
        m = re.search(r"(\d+)\.png$", p)
        indices.append(int(m.group(1)) if m else len(indices))
    flows, weight_maps = [], []
    h, w = frames[0].shape[:2]
    for prev, cur in zip(indices, indices[1:]):
        if args.flows:
            back_path = os.path.join(
                args.flows, f"backward_{cur:05d}_{prev:05d}.flo")
            if not os.path.exists(back_path):
                raise CLIError(f"missing flow file {back_path}")
            back = flow.read_flo(back_path)
            fwd_path = os.path.join(
                args.flows, f"forward_{prev:05d}_{cur:05d}.flo")
            if os.path.exists(fwd_path):
                weight_maps.append(
                    flow.consistency_weights(flow.read_flo(fwd_path), back))
            else:
                weight_maps.append(np.ones(back.shape[:2]))
        else:
            back = flow.synth_translation_flow(h, w, 0.0, 0.0)
            weight_maps.append(np.ones((h, w)))
        flows.append(back)
    print(pipeline.temporal_error(frames, flows, weight_maps))
    return 0


def cmd_flow(args):
    if args.flow_op != "synth":
        raise CLIError(f"unknown flow operation {args.flow_op!r}")
    m = re.fullmatch(r"(\d+)x(\d+)", args.size)
    if not m:
        raise CLIError(f"--size: expected HxW, got {args.size!r}")
    h, w = int(m.group(1)), int(m.group(2))
    flow.write_flo(flow.synth_translation_flow(h, w, args.dx, args.dy), args.out)
    print(args.out)
    return 0


def build_parser():
    parser = _Parser(prog="pvstyle",
                     description="Photorealistic video style transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stylize", parents=[], help="stylize a single image")
    _add_config_flags(p)
    p.add_argument("--content", help="content image (PNG or PPM)")
    p.add_argument("--out", help="output image path")
    p.add_argument("--trace", help="write per-iteration loss CSV here")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("stylize-video", help="stylize a frame sequence")
    _add_config_flags(p)
    p.add_argument("--manifest", help="rerun from a previous run.json")
    p.set_defaults(func=cmd_stylize_video)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("laplacian", help="dump a matting Laplacian as triplets")
    p.add_argument("--input", required=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_laplacian)

    p = sub.add_parser("metrics", help="temporal error of a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--flows", help="directory of .flo files (default: zero flow)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("flow", help="flow-field utilities")
    p.add_argument("flow_op", choices=["synth"])
    p.add_argument("--dx", type=float, default=0.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--size", required=True, help="HxW")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PVStyleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
