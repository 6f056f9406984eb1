"""Command line entry point: ``compseg <subcommand> [flags]``.

Exit status is 0 on success, 1 when flags or inputs fail validation and 2
when a run fails (non-finite loss, unreadable files, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, data, gradsuite, netpbm
from .network import SegNetConfig, build
from .optim import LrSchedule
from .tensor import Tensor, no_grad
from .trainer import (MODES, Corpus, TrainConfig, TrainingError, config_dict, evaluate,
                      load_checkpoint, resume_optimizer, save_checkpoint, train)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
CHECKPOINT_NAME = "last.cseg"


class ValidationError(Exception):
    """Bad flags or inputs; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _show(name: str, cfg: dict) -> None:
    print(json.dumps({"command": name, **cfg}, sort_keys=True, default=str), flush=True)


# -- gen-data --------------------------------------------------------------------------

def _gen_prepare(a):
    gen = data.GenConfig(size=a.size, seed=a.seed, hole_prob=a.hole_prob, fuzz=a.fuzz, hairs=a.hairs)
    gen.validate()
    if a.count < a.folds:
        raise ValidationError(f"--count must be at least --folds ({a.folds})")
    if not 0.0 < a.labeled_fraction <= 1.0:
        raise ValidationError("--labeled-fraction must be in (0, 1]")
    cfg = {"out": a.out, "count": a.count, "folds": a.folds, "labeled_fraction": a.labeled_fraction,
           **asdict(gen)}
    return cfg, gen


def _gen_run(a, gen) -> None:
    samples = data.generate(gen, a.count)
    data.write_corpus(samples, a.out)
    splits = data.make_splits([s.id for s in samples], a.folds, a.labeled_fraction, a.seed)
    splits.write(Path(a.out) / "splits.csv")
    holes = sum(s.hole is not None and bool(s.hole.any()) for s in samples)
    print(f"wrote {len(samples)} samples ({holes} with holes) to {a.out}")


# -- train -----------------------------------------------------------------------------

def _load_corpus(path: str):
    root = Path(path)
    if not (root / "splits.csv").is_file():
        raise ValidationError(f"{path} has no splits.csv; create the corpus with gen-data")
    splits = data.SplitManifest.read(root / "splits.csv")
    return Corpus(root), splits


def _train_prepare(a):
    sched = LrSchedule.parse(a.schedule, a.lr)
    corpus, splits = _load_corpus(a.data)
    if a.fold not in splits.folds():
        raise ValidationError(f"--fold {a.fold} not in manifest folds {splits.folds()}")
    size = corpus.labeled(splits.val_ids(a.fold)[0]).image.shape[-1]
    SegNetConfig(input_size=size, base_channels=a.channels).validate()
    tcfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, base_lr=a.lr, drop_every=sched.drop_every,
                       drop_factor=sched.drop_factor, mode=a.mode, labeled_fraction=a.labeled_fraction,
                       seed=a.seed, eval_every=a.eval_every, checkpoint_dir=a.out, fold=a.fold,
                       base_channels=a.channels)
    tcfg.validate()
    if a.labeled_fraction is not None and not 0.0 < a.labeled_fraction <= 1.0:
        raise ValidationError("--labeled-fraction must be in (0, 1]")
    cfg = {"data": a.data, "input_size": size, "schedule": a.schedule, "resume": a.resume,
           **config_dict(tcfg)}
    return cfg, (corpus, splits, tcfg, size)


def _train_run(a, state) -> None:
    corpus, splits, tcfg, size = state
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    start, opt = 0, None
    if a.resume and ckpt.exists():
        cnet, tensors, meta = load_checkpoint(ckpt)
        if MODES[meta.get("mode", 0)] != tcfg.mode:
            raise TrainingError("checkpoint was trained in a different mode")
        start = meta["epoch"]
        opt = resume_optimizer(cnet, tensors, tcfg.mode, tcfg.base_lr)
        print(f"resuming from epoch {start}")
    else:
        cnet = build(SegNetConfig(input_size=size, base_channels=tcfg.base_channels), tcfg.seed)
    with open(out / "config.json", "w") as fh:
        json.dump(config_dict(tcfg), fh, indent=2, sort_keys=True)
    result = train(cnet, corpus, splits, tcfg, opt=opt, start_epoch=start, log_path=out / "train_log.csv")
    if not result.log:  # zero epochs requested: still leave a usable checkpoint
        save_checkpoint(ckpt, cnet, result.opt, epoch=start, seed=tcfg.seed, mode=MODES.index(tcfg.mode))
    last = result.log[-1] if result.log else {}
    print(f"done in {result.seconds:.1f}s; checkpoint {ckpt}; last epoch "
          + json.dumps({k: v for k, v in last.items()}, default=float))


# -- eval ------------------------------------------------------------------------------

def _eval_prepare(a):
    if not Path(a.ckpt).is_file():
        raise ValidationError(f"checkpoint {a.ckpt} does not exist")
    corpus, splits = _load_corpus(a.data)
    if a.fold not in splits.folds():
        raise ValidationError(f"--fold {a.fold} not in manifest folds {splits.folds()}")
    return {"ckpt": a.ckpt, "data": a.data, "fold": a.fold, "out": a.out}, (corpus, splits)


def _eval_run(a, state) -> None:
    corpus, splits = state
    cnet, _, _ = load_checkpoint(a.ckpt)
    summary = evaluate(cnet, corpus, splits, a.fold, a.out)
    print(json.dumps({k: v for k, v in summary.items() if k != "id"}, default=float))


# -- gradcheck -------------------------------------------------------------------------

def _grad_prepare(a):
    if a.op != "all" and a.op not in gradsuite.CHECKS:
        raise ValidationError(f"unknown --op {a.op!r}; choose all or one of {', '.join(gradsuite.CHECKS)}")
    if a.eps <= 0 or a.tol <= 0:
        raise ValidationError("--eps and --tol must be positive")
    return {"op": a.op, "eps": a.eps, "tol": a.tol, "seed": a.seed}, None


def _grad_run(a, _) -> int:
    results = gradsuite.run_checks(a.op, a.eps, a.tol, a.seed)
    failed = 0
    for op, reports in results.items():
        for r in reports:
            status = "PASS" if r.passed else "FAIL"
            failed += not r.passed
            print(f"{status} {op}/{r.name} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g}")
    total = sum(len(v) for v in results.values())
    print(f"{total - failed}/{total} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAILED


# -- rate-map --------------------------------------------------------------------------

def _rate_prepare(a):
    for p in (a.ckpt, a.image):
        if not Path(p).is_file():
            raise ValidationError(f"{p} does not exist")
    return {"ckpt": a.ckpt, "image": a.image, "out_prefix": a.out_prefix, "net": a.net}, None


def _rate_run(a, _) -> None:
    cnet, _, _ = load_checkpoint(a.ckpt)
    image = netpbm.read_ppm(a.image)
    size = cnet.cfg.input_size
    if image.shape[1:] != (size, size):
        raise ValidationError(f"image is {image.shape[2]}x{image.shape[1]}, network expects {size}x{size}")
    net = cnet.fg if a.net == "fg" else cnet.bg
    with no_grad():
        _, rate_maps = net.forward(Tensor._wrap(image[None]))
    Path(a.out_prefix).parent.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(rate_maps, start=1):
        raw = r.data[0, 0].astype(np.float64)
        lo, hi = float(raw.min()), float(raw.max())
        norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        path = f"{a.out_prefix}_kam{i}.pgm"
        netpbm.write(path, netpbm.to_uint8(norm))
        print(f"kam{i} {raw.shape[1]}x{raw.shape[0]} raw_min={lo:.6f} raw_max={hi:.6f} -> {path}")


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="compseg", description="Complementary lesion segmentation toolkit.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus and its fold manifest", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--count", type=int, default=200, help="number of images")
    g.add_argument("--size", type=int, default=192, help="image side in pixels (multiple of 16)")
    g.add_argument("--seed", type=int, default=0, help="generator and split seed")
    g.add_argument("--hole-prob", type=float, default=0.5, help="probability of a lesion interior hole")
    g.add_argument("--fuzz", type=float, default=6.0, help="boundary blur width in pixels")
    g.add_argument("--hairs", type=int, default=0, help="hair strokes per image")
    g.add_argument("--folds", type=int, default=4, help="cross-validation folds")
    g.add_argument("--labeled-fraction", type=float, default=1.0, help="labeled share of each training fold")
    g.set_defaults(prepare=_gen_prepare, run=_gen_run)

    t = sub.add_parser("train", help="train a network pair on one fold", formatter_class=fmt)
    t.add_argument("--data", required=True, help="corpus directory from gen-data")
    t.add_argument("--mode", choices=MODES, default="complementary", help="complementary pair or foreground-only")
    t.add_argument("--labeled-fraction", type=float, default=None,
                   help="relabel the training fold to this labeled share; None keeps the manifest flags")
    t.add_argument("--epochs", type=int, default=60, help="training epochs")
    t.add_argument("--batch", type=int, default=4, help="batch size")
    t.add_argument("--lr", type=float, default=1e-3, help="base learning rate")
    t.add_argument("--schedule", default="step:40:0.1", help="step:<every>:<factor> or none")
    t.add_argument("--fold", type=int, default=0, help="validation fold")
    t.add_argument("--out", required=True, help="run directory for checkpoint, log and config")
    t.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    t.add_argument("--channels", type=int, default=16, help="base channel count")
    t.add_argument("--eval-every", type=int, default=1, help="validate and checkpoint every N epochs")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.cseg if present")
    t.set_defaults(prepare=_train_prepare, run=_train_run)

    e = sub.add_parser("eval", help="score a checkpoint on a validation fold", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="corpus directory")
    e.add_argument("--fold", type=int, default=0, help="validation fold")
    e.add_argument("--out", default=None, help="per-image metrics CSV")
    e.set_defaults(prepare=_eval_prepare, run=_eval_run)

    c = sub.add_parser("gradcheck", help="finite-difference check of every gradient", formatter_class=fmt)
    c.add_argument("--op", default="all", help=f"all or one of: {', '.join(gradsuite.CHECKS)}")
    c.add_argument("--eps", type=float, default=1e-3, help="central difference step")
    c.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    c.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    c.set_defaults(prepare=_grad_prepare, run=_grad_run)

    r = sub.add_parser("rate-map", help="dump per-pixel dilation rates of each aggregation module",
                       formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--image", required=True, help="input PPM at the network's input size")
    r.add_argument("--out-prefix", required=True, help="output path prefix; writes <prefix>_kam<i>.pgm")
    r.add_argument("--net", choices=("fg", "bg"), default="fg", help="which network of the pair")
    r.set_defaults(prepare=_rate_prepare, run=_rate_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, state = args.prepare(args)
    except (ValidationError, ValueError) as exc:
        print(f"compseg {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _show(args.command, cfg)
    try:
        code = args.run(args, state)
    except ValidationError as exc:
        print(f"compseg {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError, checkpoint.CheckpointError, netpbm.NetpbmError, ArithmeticError) as exc:
        print(f"compseg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
