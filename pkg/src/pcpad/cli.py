"""``pcpad`` command line: tensor ops, ratio maps, training and evaluation.

Machine-readable results (CSV, JSON) go to stdout or ``--out``; logs go to
stderr. Exit status is 0 only if the command's checks held.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench
from .config import ConfigError, load_config
from .data import DatasetHandle
from .evaluation import (LEAVEOUT_FRACTIONS, EvaluationError, as_fraction, border_eval_sweep,
                         make_tile_plan, write_sweep_csv)
from .gradcheck import LAYER_KINDS, check_layer, tolerance
from .model import CheckpointError, border_cnn, border_fcn, load_checkpoint, save_checkpoint
from .padding import ConvGeometry, GeometryError, PadMode
from .pconv import ConvWeights, compute_ratio_map, conv2d_forward
from .tensor import TensorError, elementwise, load_tensor, save_tensor
from .train import TrainingDiverged, cross_test, train

log = logging.getLogger("pcpad")


class CommandFailed(Exception):
    pass


def _open_out(path):
    return open(path, "w", newline="") if path else nullcontext(sys.stdout)


def _geometry(args, k_h=None, k_w=None) -> ConvGeometry:
    k_h = k_h or args.kh or args.k
    k_w = k_w or args.kw or args.k
    if k_h is None or k_w is None:
        raise CommandFailed("kernel size required (--k, or --kh and --kw)")
    return ConvGeometry(k_h, k_w, args.stride, args.stride, args.dilation, args.dilation,
                        args.pad, args.pad)


def _add_geom_args(p, kernel=True):
    if kernel:
        p.add_argument("--k", type=int, help="square kernel size")
        p.add_argument("--kh", type=int)
        p.add_argument("--kw", type=int)
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--dilation", type=int, default=1)


def cmd_tensor(args):
    if args.op == "info":
        t = load_tensor(args.a)
        print(json.dumps({"dims": list(t.shape), "dtype": str(t.dtype)}))
        return
    if not args.b or not args.out:
        raise CommandFailed(f"tensor {args.op} needs two inputs and --out")
    save_tensor(elementwise(load_tensor(args.a), load_tensor(args.b), args.op), args.out)


def cmd_ratio_map(args):
    geom = _geometry(args)
    mask = load_tensor(args.mask).astype(np.float64) if args.mask else None
    rmap = compute_ratio_map(geom, args.h, args.w, mask)
    with _open_out(args.out) as fh:
        fh.write(",".join(f"c{j}" for j in range(rmap.ratio.shape[1])) + "\n")
        for row, ok in zip(rmap.ratio, rmap.valid):
            fh.write(",".join(repr(float(v)) if o else "nan" for v, o in zip(row, ok)) + "\n")


def cmd_conv(args):
    x = load_tensor(args.input)
    w = load_tensor(args.weight)
    if w.ndim != 4:
        raise CommandFailed("weight must be C_out x C_in x k_h x k_w")
    b = load_tensor(args.bias) if args.bias else None
    mask = load_tensor(args.mask).astype(np.float64) if args.mask else None
    if x.dtype == np.uint8:
        x = x.astype(np.float32)
    geom = _geometry(args, w.shape[2], w.shape[3])
    out, out_mask = conv2d_forward(x, ConvWeights(w, b), geom, args.mode, mask)
    save_tensor(out, args.out)
    if args.mask_out:
        save_tensor(out_mask, args.mask_out)


def cmd_train(args):
    cfg = load_config(args.config)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    mode = PadMode.parse(args.pad_mode) if args.pad_mode else cfg.pad_mode
    out = Path(args.out) if args.out else cfg.output_dir
    result = train(cfg.model_spec(mode), cfg.data, tcfg)
    save_checkpoint(result.checkpoint, out)
    print(json.dumps({"checkpoint": str(out), "best_val_acc": result.best_val,
                      "final_val_acc": result.metrics[-1]["val_acc"]}))


def _dataset(args, ckpt) -> DatasetHandle:
    if args.config:
        return load_config(args.config).data
    stored = ckpt.train_config.get("data")
    if not stored:
        raise CommandFailed("checkpoint has no dataset record; pass --config")
    return DatasetHandle(**stored)


def cmd_cross_test(args):
    ckpt = load_checkpoint(args.checkpoint)
    data = _dataset(args, ckpt)
    acc = cross_test(ckpt, args.eval_pad, data, args.split)
    print(json.dumps({"train_pad": ckpt.pad_mode.value, "eval_pad": PadMode.parse(args.eval_pad).value,
                      "split": args.split, "accuracy": acc}))


def cmd_export_data(args):
    data = load_config(args.config).data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x, y = data.split(args.split)
    save_tensor(x.astype(np.float32), out / "images.pten")
    save_tensor(y.astype(np.uint8).reshape(len(y), 1, *y.shape[1:]) if y.ndim == 3 else
                y.astype(np.uint8), out / "labels.pten")


def cmd_tile_eval(args):
    ckpt_zero = load_checkpoint(args.ckpt_zero)
    ckpt_partial = load_checkpoint(args.ckpt_partial)
    d = Path(args.images)
    images = load_tensor(d / "images.pten")
    labels = load_tensor(d / "labels.pten")
    if labels.ndim == 4:
        labels = labels[:, 0]
    if labels.ndim != 3:
        raise CommandFailed("labels.pten must be N x H x W or N x 1 x H x W")
    H, W = images.shape[2:]
    fractions = [tuple(as_fraction(v) for v in s.split(",")) for s in args.leaveout] \
        if args.leaveout else list(LEAVEOUT_FRACTIONS)
    if any(len(f) != 2 for f in fractions):
        raise CommandFailed("--leaveout takes a,b pairs")
    overlaps = args.overlap or ["0"]
    rows = []
    for tile in args.tile or [0]:
        for ov in overlaps if tile else ["0"]:
            plan = make_tile_plan(H, W, tile, ov) if tile else None
            for r in border_eval_sweep(ckpt_zero, ckpt_partial, images, labels, fractions,
                                       plan=plan, stitch=args.stitch):
                r.update(tile=tile or "full", overlap=as_fraction(ov), stitch=args.stitch)
                rows.append(r)
    with _open_out(args.out) as fh:
        write_sweep_csv(rows, fh, extra=("tile", "overlap", "stitch"))


def cmd_bench(args):
    if args.model == "border-cnn":
        spec = border_cnn(size=args.size, width=args.width)
    else:
        spec = border_fcn(size=args.size, width=args.width)
    res = bench(spec, args.iters, args.batch)
    print(json.dumps(res))


def cmd_gradcheck(args):
    kinds = LAYER_KINDS if args.layer == "all" else [args.layer]
    report, ok = {}, True
    for kind in kinds:
        err = check_layer(kind, args.trials, args.seed)
        passed = err <= tolerance(kind)
        ok &= passed
        report[kind] = {"max_rel_error": err, "tolerance": tolerance(kind), "pass": passed}
    print(json.dumps(report, indent=2))
    if not ok:
        raise CommandFailed("gradient check failed")


def cmd_activations(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model(args.pad_mode)
    x = load_tensor(args.input).astype(next(iter(ckpt.params.values())).dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, layer in enumerate(model.layers):
        x = layer.forward(x)
        save_tensor(x, out / f"{i:02d}_{type(layer).__name__.lower()}.pten")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcpad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tensor", help="elementwise ops on .pten files")
    s.add_argument("op", choices=("add", "sub", "mul", "div", "info"))
    s.add_argument("a")
    s.add_argument("b", nargs="?")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_tensor)

    s = sub.add_parser("ratio-map", help="dump the partial-padding scale map as CSV")
    _add_geom_args(s)
    s.add_argument("--h", type=int, required=True)
    s.add_argument("--w", type=int, required=True)
    s.add_argument("--mask", help="1x1xHxW .pten validity mask")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_ratio_map)

    s = sub.add_parser("conv", help="one convolution forward pass on .pten inputs")
    s.add_argument("--input", required=True)
    s.add_argument("--weight", required=True)
    s.add_argument("--bias")
    s.add_argument("--mask")
    s.add_argument("--mode", default="zero", type=PadMode.parse)
    _add_geom_args(s, kernel=False)
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--mask-out")
    s.set_defaults(func=cmd_conv)

    s = sub.add_parser("train", help="train a toy model from a config file")
    s.add_argument("config")
    s.add_argument("--pad-mode", choices=[m.value for m in PadMode])
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--out", help="checkpoint directory (default: [output] dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("cross-test", help="evaluate a checkpoint under another pad mode")
    s.add_argument("checkpoint")
    s.add_argument("--eval-pad", required=True, choices=[m.value for m in PadMode])
    s.add_argument("--config", help="dataset config (default: the one recorded in the checkpoint)")
    s.add_argument("--split", default="val", choices=("train", "val"))
    s.set_defaults(func=cmd_cross_test)

    s = sub.add_parser("export-data", help="write a dataset split as images.pten/labels.pten")
    s.add_argument("config")
    s.add_argument("--split", default="val", choices=("train", "val"))
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_export_data)

    s = sub.add_parser("tile-eval", help="tiled segmentation eval with centre leave-out")
    s.add_argument("--ckpt-zero", required=True)
    s.add_argument("--ckpt-partial", required=True)
    s.add_argument("--images", required=True, help="directory with images.pten and labels.pten")
    s.add_argument("--tile", type=int, action="append", help="tile size; 0 = full image (repeatable)")
    s.add_argument("--overlap", action="append", help="overlap fraction, e.g. 0 or 1/3 (repeatable)")
    s.add_argument("--stitch", default="average", choices=("average", "center-priority"))
    s.add_argument("--leaveout", action="append", help="a,b centre fractions (repeatable)")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_tile_eval)

    s = sub.add_parser("bench", help="first vs cached iteration timing, zero vs partial")
    s.add_argument("--model", default="border-cnn", choices=("border-cnn", "border-fcn"))
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--batch", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of layer gradients")
    s.add_argument("--layer", default="all", choices=("all",) + LAYER_KINDS)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("activations", help="dump every layer's output for one input")
    s.add_argument("checkpoint")
    s.add_argument("--input", required=True)
    s.add_argument("--pad-mode", choices=[m.value for m in PadMode])
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_activations)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            args.func(args)
    except (CommandFailed, ConfigError, CheckpointError, EvaluationError, GeometryError,
            TensorError, TrainingDiverged, ValueError, ZeroDivisionError, OSError) as exc:
        print(f"pcpad {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
