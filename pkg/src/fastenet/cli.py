"""Command-line interface: ``fastenet <command> [flags]``.

Every failure prints a single ``error: <ErrorClass>: <message>`` line to
stderr and exits nonzero (2 for bad flags, 1 for anything else).
"""

import argparse
import glob
import logging
import os
import statistics
import sys
import time

from . import _accel, evaluation, formats, netgraph, postprocess, synthdata, training

# Input sizes at which the comparison tables are quoted.
REFERENCE_INPUT = {"fastenet": (512, 1600), "vanillanet": (512, 1600), "largenet": (512, 1536)}


class UsageError(ValueError):
    """A flag is missing or has an invalid value."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Flag validation
# ---------------------------------------------------------------------------


def _theta(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"theta must be a number, got {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"theta must lie in [0, 1], got {v}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _pos_int(text):
    v = _nonneg_int(text)
    if v == 0:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _pos_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _need_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} {path!r} does not exist")
    return path


def _need_dataset(path):
    if path is None:
        raise UsageError("--input (dataset directory) is required")
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise UsageError(f"--input {path!r} is not a dataset directory (no manifest.json)")
    return path


def _need_out(path):
    if path is None:
        raise UsageError("--out is required")
    return path


def _load_weights(args):
    if args.weights is None:
        raise UsageError("--weights is required")
    _need_file(args.weights, "--weights")
    return formats.load_model(args.weights, expect=args.net)


def _split(root, which):
    train, val = synthdata.load_dataset(root)
    chosen = {"train": train, "val": val, "all": train + val}[which]
    return [i for i, _ in chosen], [s for _, s in chosen]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    out = _need_out(args.out)
    cfg = synthdata.SceneConfig(seed=args.seed).validate()
    m = synthdata.write_dataset(out, cfg, args.n_scenes, args.train_fraction)
    n_train = sum(e["split"] == "train" for e in m["scenes"])
    print(f"wrote {len(m['scenes'])} scenes ({n_train} train / {len(m['scenes']) - n_train} val) to {out}")


def cmd_train(args):
    root = _need_dataset(args.input)
    out = _need_out(args.out)
    spec = netgraph.build(args.net)
    weights = _load_weights(args)[1] if args.weights else None
    cfg = training.TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size, epochs=args.epochs,
        reduction=args.reduction, crops_per_scene=args.crops_per_scene, crop_size=args.crop_size,
        mining_mode=args.mining_mode, theta=args.theta, seed=args.seed,
    ).validate()
    _, train_scenes = _split(root, "train")
    _, val_scenes = _split(root, "val")
    weights, history = training.train(spec, train_scenes, val_scenes, cfg, weights, out, mining=not args.no_mining)
    last = history.records[-1]
    print(f"trained {len(history.records)} epochs; final loss {last.loss:.6g} "
          f"precision {last.precision:.4f} recall {last.recall:.4f} at theta {cfg.theta}")
    print(f"checkpoints in {out}")


def _infer_inputs(path):
    if path is None:
        raise UsageError("--input (image or directory) is required")
    if os.path.isdir(path):
        files = sorted(p for p in glob.glob(os.path.join(path, "*.pgm")) if not p.endswith("_mask.pgm"))
        if not files:
            raise UsageError(f"no .pgm images in {path!r}")
        return files
    return [_need_file(path, "--input")]


def cmd_infer(args):
    files = _infer_inputs(args.input)
    out = _need_out(args.out)
    spec, weights = _load_weights(args)
    for path in files:
        stem = os.path.splitext(os.path.basename(path))[0]
        image = formats.read_pgm(path)
        netgraph.check_input(spec, *image.shape)
        sal = netgraph.forward(spec, weights, training.image_to_input(image), "infer")[0, 0]
        dets = postprocess.detect(sal, args.theta, spec.output_stride, args.min_area)
        formats.write_pgm(os.path.join(out, f"{stem}_saliency.pgm"), formats.saliency_to_pgm(sal))
        formats.write_annotation(os.path.join(out, f"{stem}.ann"), stem, image.shape, detections=dets)
        if args.overlay:
            gt_path = os.path.splitext(path)[0] + ".ann"
            gts = formats.gt_boxes(formats.read_annotation(gt_path)) if os.path.isfile(gt_path) else []
            formats.write_ppm(os.path.join(out, f"{stem}_overlay.ppm"), formats.overlay(image, dets, gts))
        print(f"{stem}: {evaluation.count_fasteners(dets)} fasteners")


def _model_maps(args, scenes):
    spec, weights = _load_weights(args)
    return training.predict(spec, weights, scenes), spec


def cmd_eval(args):
    root = _need_dataset(args.input)
    ids, scenes = _split(root, args.split)
    gts = [s.boxes for s in scenes]
    if args.detections:
        results = []
        for i, g in zip(ids, gts):
            ann = formats.read_annotation(_need_file(os.path.join(args.detections, f"{i}.ann"), "detections file"))
            results.append(evaluation.match(ann["detections"], g))
    else:
        maps, spec = _model_maps(args, scenes)
        results = [evaluation.match(postprocess.detect(m, args.theta, spec.output_stride, args.min_area), g)
                   for m, g in zip(maps, gts)]
    total = evaluation.aggregate(results)
    p, r = evaluation.precision_recall(total)
    print(f"images {len(scenes)} theta {args.theta} tp {total.tp} fp {total.fp} fn {total.fn} "
          f"precision {p:.4f} recall {r:.4f}")


def cmd_pr_curve(args):
    root = _need_dataset(args.input)
    out = _need_out(args.out)
    _, scenes = _split(root, args.split)
    maps, spec = _model_maps(args, scenes)
    pts = evaluation.pr_curve(maps, [s.boxes for s in scenes], output_stride=spec.output_stride,
                              min_area=args.min_area)
    formats.write_text_atomic(out, evaluation.pr_to_csv(pts))
    if args.plot:
        evaluation.plot_pr({args.net: pts}, args.plot)
    b = evaluation.best_point(pts)
    print(f"wrote {len(pts)} points to {out}; best F1 at theta {b.theta:.2f}: "
          f"precision {b.precision:.4f} recall {b.recall:.4f}")


def analyze_text(name, h=None, w=None):
    spec = netgraph.build(name)
    dh, dw = REFERENCE_INPUT[name]
    h, w = h or dh, w or dw
    shapes = netgraph.check_input(spec, h, w)
    macs = netgraph.layer_macs(spec, h, w)
    rfs = netgraph.receptive_field(spec)
    lines = [
        f"network    {name}",
        f"input      1@{w}x{h} (W x H)",
        f"params     {netgraph.param_count(spec)}",
        f"flops      {sum(macs)} MACs ({sum(macs) / 1e9:.3f} G)",
        "",
        f"{'layer':>5} {'op':>5} {'k':>2} {'pool':>4} {'input':>14} {'output':>14} {'MACs':>13} {'rf':>7} {'jump':>5}",
    ]
    for l, (ci, ih, iw, co, oh, ow), m, (_, rf, jump) in zip(spec.layers, shapes, macs, rfs):
        lines.append(
            f"{l.index:>5} {l.op:>5} {l.kernel:>2} {'2x2' if l.pool else '-':>4} "
            f"{f'{ci}@{iw}x{ih}':>14} {f'{co}@{ow}x{oh}':>14} {m:>13} {rf:>7g} {jump:>5g}"
        )
    return "\n".join(lines) + "\n"


def cmd_analyze(args):
    if (args.height is None) != (args.width is None):
        raise UsageError("--height and --width must be given together")
    sys.stdout.write(analyze_text(args.net, args.height, args.width))


def cmd_bench(args):
    spec = netgraph.build(args.net)
    if args.weights:
        spec, weights = _load_weights(args)
    else:
        weights = netgraph.init_weights(spec, seed=args.seed)
    h, w = REFERENCE_INPUT[args.net]
    cfg = synthdata.SceneConfig(height=h, width=w, seed=args.seed).validate()
    x = training.image_to_input(synthdata.generate_scene(cfg).image)

    def once():
        sal = netgraph.forward(spec, weights, x, "infer")[0, 0]
        return postprocess.detect(sal, args.theta, spec.output_stride, args.min_area)

    for _ in range(args.warmup):
        once()
    times = []
    for i in range(args.iters):
        t0 = time.perf_counter()
        once()
        dt = time.perf_counter() - t0
        times.append(dt)
        print(f"iter {i + 1} {dt * 1e3:.2f} ms")
    fps = [1.0 / t for t in times]
    sd = statistics.stdev(fps) if len(fps) > 1 else 0.0
    print(f"{args.net} {w}x{h} backend {_accel.backend_name()}: "
          f"{statistics.fmean(fps):.2f} FPS mean, {sd:.2f} stddev over {len(fps)} iterations")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "pr-curve": cmd_pr_curve, "analyze": cmd_analyze, "bench": cmd_bench,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--net", choices=netgraph.NET_NAMES, default="fastenet")
    common.add_argument("--weights", help="model file (.fnm)")
    common.add_argument("--input")
    common.add_argument("--out")
    common.add_argument("--theta", type=_theta, default=0.5)
    common.add_argument("--seed", type=_nonneg_int, default=0)
    common.add_argument("--min-area", type=_pos_int, default=1)
    common.add_argument("--strict-deterministic", action="store_true",
                        help="single-threaded BLAS so results never depend on reduction order")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fastenet", description="Saliency-map fastener detector.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-scenes", type=_pos_int, default=60)
    g.add_argument("--train-fraction", type=float, default=700 / 997)

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--epochs", type=_pos_int, default=20)
    t.add_argument("--lr", type=_pos_float, default=1e-6)
    t.add_argument("--weight-decay", type=float, default=1e-2)
    t.add_argument("--batch-size", type=_pos_int, default=8)
    t.add_argument("--crops-per-scene", type=_pos_int, default=1000)
    t.add_argument("--crop-size", type=_pos_int, default=256)
    t.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    t.add_argument("--mining-mode", choices=("per-type", "sum"), default="per-type")
    t.add_argument("--no-mining", action="store_true")

    i = sub.add_parser("infer", parents=[common], help="saliency maps and detections for images")
    i.add_argument("--overlay", action="store_true", help="also write a PPM with boxes drawn")

    e = sub.add_parser("eval", parents=[common], help="precision/recall at one theta")
    e.add_argument("--split", choices=("train", "val", "all"), default="val")
    e.add_argument("--detections", help="directory of <id>.ann files with det records")

    c = sub.add_parser("pr-curve", parents=[common], help="theta sweep to CSV (and SVG)")
    c.add_argument("--split", choices=("train", "val", "all"), default="val")
    c.add_argument("--plot", help="optional SVG output path")

    a = sub.add_parser("analyze", parents=[common], help="params, FLOPs and receptive fields")
    a.add_argument("--height", type=_pos_int)
    a.add_argument("--width", type=_pos_int)

    b = sub.add_parser("bench", parents=[common], help="forward + postprocess throughput")
    b.add_argument("--iters", type=_pos_int, default=50)
    b.add_argument("--warmup", type=_nonneg_int, default=5)
    return p


def _one_line(exc):
    return " ".join(str(exc).split()) or "(no message)"


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: UsageError: {_one_line(e)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _accel.set_strict_deterministic(args.strict_deterministic)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: UsageError: {_one_line(e)}", file=sys.stderr)
        return 2
    except (Exception, KeyboardInterrupt) as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
