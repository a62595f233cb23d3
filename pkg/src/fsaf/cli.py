"""Command-line entry point: ``fsaf <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``FSAF_THREADS`` caps BLAS threads (unset: 1 for reproducibility, 0: no cap).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig, load_config
from .data import Dataset, load_annotations, make_synthetic

log = logging.getLogger("fsaf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_ann(path):
    try:
        return load_annotations(path)
    except FileNotFoundError as exc:
        raise DataError(f"annotation file not found: {path}") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path):
    from .model import load_model
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _config(path, overrides=None) -> TrainConfig:
    data = {}
    if path is not None:
        try:
            data = load_config(path).to_dict()
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- subcommands

def cmd_make_synth(args):
    try:
        ann = make_synthetic(args.out, args.n_images, args.image_size, args.num_classes,
                             (args.min_instances, args.max_instances), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    count = sum(len(v) for v in ann.instances.values())
    print(f"wrote {len(ann.images)} images, {count} instances to {args.out}")


def _pick_image(ann, image_id):
    by_id = {r.id: r for r in ann.images}
    if image_id not in by_id:
        raise DataError(f"image id {image_id} not in annotations")
    return by_id[image_id]


def _selections(config, params, boxes, image):
    """Per-instance (online, heuristic) results for one normalized image."""
    from .model import forward
    from .train import select_levels
    if not config.use_af:
        raise UsageError("level selection needs a model with the anchor-free branch")
    outs = forward(params, image[None].astype(np.dtype(config.dtype)))
    probs = [o.cls_prob[0].astype(np.float64) for o in outs]
    regs = [o.reg[0].astype(np.float64) for o in outs]
    online = select_levels(config, boxes, probs, regs, "online")
    heuristic = select_levels(config, boxes, probs, regs, "heuristic")
    return online, heuristic


def _model_for(args):
    from .model import build_model
    if args.model is not None:
        return _load_model(args.model)
    return build_model(_config(args.config))


def cmd_gen_targets(args):
    from .data import to_tensor
    from .targets import dump_targets, generate_targets
    ann = _load_ann(args.annotations)
    rec = _pick_image(ann, args.image_id)
    boxes = ann.boxes(rec.id)
    if args.levels:
        levels = [int(v) for v in args.levels.split(",")]
        if len(levels) != len(boxes):
            raise UsageError(f"--levels has {len(levels)} entries for {len(boxes)} instances")
        config = _config(args.config)
    else:
        params = _model_for(args)
        config = params.config
        online, heuristic = _selections(config, params, boxes, to_tensor(ann.load_image(rec)))
        levels = [r.level for r in (online if args.selection == "online" else heuristic)]
    try:
        cmaps, rmaps = generate_targets(boxes, levels, config.pyramid, ann.num_classes,
                                        (rec.height, rec.width), config.S, config.eps_e,
                                        config.eps_i)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    written = dump_targets(args.out, cmaps, rmaps)
    print(f"image {rec.id}: levels {levels}; wrote {len(written)} files to {args.out}")


def cmd_select(args):
    from .data import to_tensor
    from .selection import agreement_stats
    ann = _load_ann(args.annotations)
    params = _model_for(args)
    config = params.config
    records = ann.images if args.limit is None else ann.images[:args.limit]
    all_on, all_he = [], []
    print("image instance class online heuristic agreement")
    for rec in records:
        boxes = ann.boxes(rec.id)
        if not boxes:
            continue
        online, heuristic = _selections(config, params, boxes, to_tensor(ann.load_image(rec)))
        for n, (on, he) in enumerate(zip(online, heuristic)):
            tag = "agree" if on.level == he.level else "disagree"
            print(f"{rec.id} {n} {boxes[n].class_id} {on.level} {he.level} {tag}")
            # globally unique ids for the aggregate statistics
            on.instance = he.instance = len(all_on)
            all_on.append(on)
            all_he.append(he)
    stats = agreement_stats(all_on, all_he)
    print(f"summary instances={stats.total} agree={stats.agree} disagree={stats.disagree} "
          f"disagreement_rate={stats.disagreement_rate:.4f}")
    pairs = " ".join(f"{a}->{b}:{c}" for (a, b), c in stats.contingency.items())
    print(f"contingency {pairs}")


def cmd_train(args):
    from .model import save_model
    from .train import Trainer
    overrides = {"iterations": args.iterations, "seed": args.seed}
    config = _config(args.config, overrides)
    ann = _load_ann(args.data)
    if ann.num_classes != config.num_classes:
        raise DataError(f"dataset has {ann.num_classes} classes, config expects "
                        f"{config.num_classes}")
    if any(r.width != config.image_size or r.height != config.image_size for r in ann.images):
        raise DataError(f"all images must be {config.image_size}x{config.image_size}")
    trainer = Trainer(config, Dataset(ann))
    trainer.train(log_path=args.log, log_every=args.log_every)
    save_model(trainer.params, args.out)
    last = trainer.state.history[-1] if trainer.state.history else None
    if last is not None:
        print(f"trained {trainer.state.iteration} iterations, final loss {last.total:.6f}")
    print(f"model written to {args.out}")


def _detect_all(params, ann, options):
    from .data import to_tensor
    from .inference import detect_batch
    images = np.stack([to_tensor(ann.load_image(r), np.dtype(params.config.dtype))
                       for r in ann.images])
    dets = detect_batch(params, images, options)
    return {r.id: d for r, d in zip(ann.images, dets)}


def cmd_infer(args):
    from .inference import DetectOptions, save_detections
    params = _load_model(args.model)
    ann = _load_ann(args.annotations)
    options = DetectOptions(score_thresh=args.score_thresh, top_k=args.top_k,
                            nms_thresh=args.nms_thresh, max_detections=args.max_detections)
    if args.branch != "all":
        options.use_af = args.branch == "af"
        options.use_ab = args.branch == "ab"
    dets = _detect_all(params, ann, options)
    save_detections(args.out, dets)
    print(f"{sum(len(v) for v in dets.values())} detections on {len(dets)} images -> {args.out}")


def cmd_eval(args):
    from .evaluation import evaluate
    from .inference import load_detections
    ann = _load_ann(args.annotations)
    try:
        dets = load_detections(args.detections)
    except FileNotFoundError as exc:
        raise DataError(f"detections file not found: {args.detections}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{args.detections}: {exc}") from exc
    gts = {r.id: ann.boxes(r.id) for r in ann.images}
    report = evaluate(dets, gts, ann.num_classes, args.max_dets)
    print(report.table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def cmd_gradcheck(args):
    from .model import build_model
    from .train import gradient_check
    overrides = {"seed": args.seed, "branches": args.branches}
    if args.config is None:
        # a tiny network keeps the per-parameter finite differences fast
        overrides.update(image_size=64, backbone_channels=[4, 4, 8, 8, 8], width=6)
    config = _config(args.config, overrides)
    with tempfile.TemporaryDirectory() as tmp:
        ann = make_synthetic(tmp, args.images, config.image_size, config.num_classes,
                             seed=args.seed)
        images, boxes = Dataset(ann).batch(range(args.images), dtype=np.float64)
    report = gradient_check(build_model(config), images, boxes, samples=args.samples,
                            step=args.step, tolerance=args.tolerance, seed=args.seed)
    for layer, err in sorted(report.per_layer.items()):
        print(f"{layer:<12} {err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} over {report.samples} "
          f"samples (tolerance {report.tolerance:g}, worst layer {report.worst_layer}, "
          f"{report.kinks} excluded at ReLU kinks)")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_ablate(args):
    from .ablation import run_ablation
    overrides = {"iterations": args.iterations}
    base = _config(args.config, overrides)
    seeds = tuple(args.seed + n for n in range(args.num_seeds))
    with tempfile.TemporaryDirectory() as tmp:
        if args.train is not None:
            train = Dataset(_load_ann(args.train))
        else:
            train = Dataset(make_synthetic(Path(tmp) / "train", args.train_images, base.image_size,
                                           base.num_classes, seed=args.seed))
        if args.test is not None:
            test = Dataset(_load_ann(args.test))
        else:
            test = Dataset(make_synthetic(Path(tmp) / "test", args.test_images, base.image_size,
                                          base.num_classes, seed=args.seed + 10_000))
    result = run_ablation(base, train, test, seeds)
    print(result.table())
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsaf", description="Feature-selective anchor-free detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("make-synth", help="generate a synthetic rectangle dataset")
    s.add_argument("out", help="output directory")
    s.add_argument("-n", "--n-images", type=int, default=100)
    s.add_argument("--image-size", type=int, default=128)
    s.add_argument("--num-classes", type=int, default=3)
    s.add_argument("--min-instances", type=int, default=1)
    s.add_argument("--max-instances", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synth)

    def model_args(s):
        g = s.add_mutually_exclusive_group()
        g.add_argument("--model", help="trained model file (default: fresh model from --config)")
        g.add_argument("--config", help="JSON TrainConfig for a freshly initialized model")

    s = sub.add_parser("gen-targets", help="dump target maps of one image as PGM / binary files")
    s.add_argument("annotations")
    s.add_argument("--image-id", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--levels", help="comma-separated level per instance (skips selection)")
    s.add_argument("--selection", choices=("online", "heuristic"), default="heuristic")
    model_args(s)
    s.set_defaults(func=cmd_gen_targets)

    s = sub.add_parser("select", help="online vs heuristic level per instance")
    s.add_argument("annotations")
    s.add_argument("--limit", type=int, help="only the first N images")
    model_args(s)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("config", help="JSON TrainConfig")
    s.add_argument("--data", required=True, help="training annotations")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--log", help="per-iteration loss CSV")
    s.add_argument("--iterations", type=int, help="override config iterations")
    s.add_argument("--seed", type=int, help="override config seed")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run detection, write detections JSON")
    s.add_argument("model")
    s.add_argument("annotations", help="image list (annotations file)")
    s.add_argument("--out", required=True)
    s.add_argument("--score-thresh", type=float, default=0.05)
    s.add_argument("--top-k", type=int, default=1000)
    s.add_argument("--nms-thresh", type=float, default=0.5)
    s.add_argument("--max-detections", type=int, default=100)
    s.add_argument("--branch", choices=("all", "af", "ab"), default="all")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score detections against annotations")
    s.add_argument("detections")
    s.add_argument("annotations")
    s.add_argument("--out", help="EvalReport JSON")
    s.add_argument("--max-dets", type=int, default=100)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of a fresh model")
    s.add_argument("--config", help="JSON TrainConfig (default: a tiny network)")
    s.add_argument("--branches", choices=("af", "ab", "both"), default="both")
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--images", type=int, default=2)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train the four branch/selection variants and compare")
    s.add_argument("--config", help="base JSON TrainConfig")
    s.add_argument("--train", help="training annotations (default: synthesize)")
    s.add_argument("--test", help="held-out annotations (default: synthesize)")
    s.add_argument("--train-images", type=int, default=500)
    s.add_argument("--test-images", type=int, default=100)
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int, default=0, help="first training seed; also seeds the data")
    s.add_argument("--num-seeds", type=int, default=3)
    s.add_argument("--out", help="results JSON")
    s.set_defaults(func=cmd_ablate)
    return p


def _thread_limit():
    raw = os.environ.get("FSAF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"FSAF_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise UsageError(f"FSAF_THREADS must be >= 0, got {n}")
    return None if n == 0 else n


def main(argv=None) -> int:
    from .train import NumericalError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=_thread_limit()):
            code = args.func(args)
    except UsageError as exc:
        print(f"fsaf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fsaf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"fsaf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
