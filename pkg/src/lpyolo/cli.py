"""Command-line entry point.

Subcommands: infer (single image), bench (staged latency), serve (TCP
stream), eval (average precision against ground truth), init-weights
(deterministic fixture weights), fold (parallelism/latency exploration).

Exit codes: 0 success, 1 unexpected runtime failure, 2 bad input or
arguments. Settings come from an optional JSON run config; flags win over
the file.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import folding
from .imaging import draw_detections, list_frames, pack_input, read_ppm, resize_nearest, write_ppm
from .model import (
    Model,
    ModelConfig,
    RunConfig,
    build_model,
    forward,
    load_run_config,
    load_weights,
    random_init,
    save_weights,
)
from .pipeline import PipelineConfig, serve_tcp
from .postprocess import (
    decode_grid,
    dequantize_output,
    evaluate_ap,
    format_detection_line,
    nms,
    parse_widerface_gt,
    to_pixel_box,
)

BENCH_STAGES = ("Preprocessing", "CNN", "Postprocessing")


class CliInputError(Exception):
    """Bad input or arguments; maps to exit code 2."""


def _fail_input(stage: str, e: Exception):
    raise CliInputError(f"{stage}: {e}") from e


def _load_run_config(args) -> RunConfig:
    run = RunConfig()
    if getattr(args, "config", None):
        try:
            run = load_run_config(args.config)
        except (OSError, ValueError) as e:
            _fail_input("config", e)
    overrides = {}
    for flag, field in (
        ("conf", "conf_threshold"),
        ("nms_iou", "nms_iou"),
        ("decode_mode", "decode_mode"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[field] = v
    if overrides:
        try:
            run = replace(run, **overrides)
        except ValueError as e:
            _fail_input("config", e)
    return run


def _load_model(args, run: RunConfig) -> Model:
    try:
        wf = load_weights(args.weights)
    except (OSError, ValueError) as e:
        _fail_input("weights", e)
    try:
        cfg = run.model_config(wf.weight_bits, wf.act_bits)
    except ValueError as e:
        _fail_input("config", e)
    try:
        return build_model(cfg, wf)
    except ValueError as e:
        _fail_input("weights", e)


def _read_image(path):
    try:
        return read_ppm(path)
    except (OSError, ValueError) as e:
        _fail_input("image", e)


def _infer_image(model, run, img):
    resized = img
    if (img.width, img.height) != (model.config.input_size, model.config.input_size):
        resized = resize_nearest(img)
    out = forward(model, pack_input(resized))
    grid = dequantize_output(out)
    dets = decode_grid(grid, model.config, run.conf_threshold, run.decode_mode)
    return out, nms(dets, run.nms_iou)


def cmd_infer(args) -> int:
    run = _load_run_config(args)
    model = _load_model(args, run)
    img = _read_image(args.image)
    out, dets = _infer_image(model, run, img)
    write_ppm(draw_detections(img, dets), args.out)
    if args.grid_dump:
        with open(args.grid_dump, "wb") as f:
            f.write(out.data.astype(np.uint8).tobytes())
    for d in dets:
        print(f"{d.score:.6f} {d.cx:.6f} {d.cy:.6f} {d.w:.6f} {d.h:.6f}")
    return 0


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise CliInputError("iters must be >= 1")
    run = _load_run_config(args)
    model = _load_model(args, run)
    img = _read_image(args.image)
    times = {name: [] for name in BENCH_STAGES}

    def one_pass(record: bool) -> None:
        t0 = time.perf_counter()
        resized = img
        if (img.width, img.height) != (model.config.input_size, model.config.input_size):
            resized = resize_nearest(img)
        x = pack_input(resized)
        t1 = time.perf_counter()
        out = forward(model, x)
        t2 = time.perf_counter()
        grid = dequantize_output(out)
        dets = decode_grid(grid, model.config, run.conf_threshold, run.decode_mode)
        nms(dets, run.nms_iou)
        t3 = time.perf_counter()
        if record:
            times["Preprocessing"].append((t1 - t0) * 1e3)
            times["CNN"].append((t2 - t1) * 1e3)
            times["Postprocessing"].append((t3 - t2) * 1e3)

    one_pass(record=False)  # warm-up excluded from statistics
    for _ in range(args.iters):
        one_pass(record=True)
    print(f"iterations: {args.iters}")
    print(f"{'stage':<16}{'mean_ms':>12}{'min_ms':>12}{'max_ms':>12}")
    for name in BENCH_STAGES:
        vals = times[name]
        print(
            f"{name:<16}{sum(vals) / len(vals):>12.3f}"
            f"{min(vals):>12.3f}{max(vals):>12.3f}"
        )
    return 0


def _frame_reader(paths):
    for p in paths:
        yield read_ppm(p)


def cmd_serve(args) -> int:
    run = _load_run_config(args)
    model = _load_model(args, run)
    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        raise CliInputError(f"listen address {args.listen!r} is not HOST:PORT")
    if not os.path.isdir(args.source):
        raise CliInputError(f"source: {args.source!r} is not a directory")
    paths = list_frames(args.source)
    cfg = PipelineConfig(queue_capacity=args.queue_capacity)
    stats = serve_tcp(
        (host, int(port)),
        _frame_reader(paths),
        model,
        cfg,
        run,
        on_bound=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True),
    )
    fps = stats.frames / stats.wall_seconds if stats.wall_seconds > 0 else 0.0
    print(f"served {stats.frames} frames in {stats.wall_seconds:.2f}s ({fps:.2f} fps)")
    return 0


def cmd_eval(args) -> int:
    run = _load_run_config(args)
    model = _load_model(args, run)
    try:
        gt = parse_widerface_gt(args.gt)
    except (OSError, ValueError) as e:
        _fail_input("ground truth", e)
    preds = []
    lines = []
    for image_id in gt.boxes:
        path = os.path.join(args.images, image_id)
        if not os.path.exists(path):
            stem, _ext = os.path.splitext(path)
            path = stem + ".ppm"
        if not os.path.exists(path):
            raise CliInputError(f"image: missing frame for {image_id!r}")
        img = _read_image(path)
        _out, dets = _infer_image(model, run, img)
        for d in dets:
            x, y, w, h = to_pixel_box(d, img.width, img.height)
            preds.append((image_id, d.score, x, y, w, h))
            lines.append(format_detection_line(image_id, d, img.width, img.height))
    if args.detections:
        with open(args.detections, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    if gt.total() == 0:
        print("AP@0.5: 0.000000 (no ground truth)")
        return 0
    ap = evaluate_ap(preds, gt, iou_threshold=0.5)
    print(f"AP@0.5: {ap:.6f}")
    return 0


def cmd_init_weights(args) -> int:
    try:
        cfg = ModelConfig(weight_bits=args.weight_bits, act_bits=args.act_bits)
    except ValueError as e:
        _fail_input("config", e)
    model = random_init(cfg, seed=args.seed, with_bias=not args.no_bias)
    save_weights(model, args.out)
    print(f"wrote {cfg.weight_bits}W{cfg.act_bits}A weights to {args.out}")
    return 0


def cmd_fold(args) -> int:
    try:
        if args.balance is not None:
            spec = folding.balance_folding(args.balance)
        else:
            spec = folding.parse_folding_spec(args.spec)
    except (OSError, ValueError) as e:
        _fail_input("folding", e)
    print(folding.format_report(spec, clock_hz=args.clock_mhz * 1e6))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpyolo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_model(sp, postproc_flags=True):
        sp.add_argument("--weights", required=True, help="weight file (LPYQ)")
        sp.add_argument("--config", help="JSON run config")
        if postproc_flags:
            sp.add_argument("--conf", type=float, help="confidence threshold override")
            sp.add_argument("--nms-iou", type=float, dest="nms_iou",
                            help="NMS IoU threshold override")
            sp.add_argument("--decode-mode", choices=("direct", "anchor_pow2"),
                            dest="decode_mode", help="box size decode override")

    sp = sub.add_parser("infer", help="detect faces in one PPM image")
    with_model(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="annotated PPM path")
    sp.add_argument("--grid-dump", help="write raw 13x13x18 grid bytes here")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("bench", help="per-stage latency on one image")
    with_model(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--iters", type=int, default=10)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("serve", help="stream detections for a frame directory over TCP")
    with_model(sp)
    sp.add_argument("--source", required=True, help="directory of PPM frames")
    sp.add_argument("--listen", default="127.0.0.1:5555", help="HOST:PORT")
    sp.add_argument("--queue-capacity", type=int, default=4)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("eval", help="average precision against annotation file")
    with_model(sp)
    sp.add_argument("--images", required=True, help="frame directory")
    sp.add_argument("--gt", required=True, help="annotation text file")
    sp.add_argument("--detections", help="also dump detection lines here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("init-weights", help="write deterministic random weights")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--weight-bits", type=int, required=True, dest="weight_bits")
    sp.add_argument("--act-bits", type=int, required=True, dest="act_bits")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-bias", action="store_true")
    sp.set_defaults(func=cmd_init_weights)

    sp = sub.add_parser("fold", help="cycle counts and throughput for a folding choice")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="folding spec file: 'layer_index pe simd' lines")
    g.add_argument("--balance", type=int, help="auto-balance within this pe*simd budget")
    sp.add_argument("--clock-mhz", type=float, default=100.0)
    sp.set_defaults(func=cmd_fold)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
