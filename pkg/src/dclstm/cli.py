"""Command-line entry point: ``dclstm <subcommand> [flags]``.

Output is plain ``key: value`` text so scripts can parse it.  Verbosity
comes from ``DCLSTM_LOG`` (quiet, info or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import data, gradcheck
from .model import ModelConfig, build, param_count
from .train import (evaluate, fit, format_ablation, load_checkpoint, load_config, run_ablation,
                    save_checkpoint)

log = logging.getLogger("dclstm")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dclstm", description="Deformable ConvLSTM video classifier.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (1 gives bit-reproducible runs)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic moving-blob corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=_size, default=(32, 32), help="frame size HxW")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", type=int, default=0, metavar="N",
                   help="add N random augmentations of every clip")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="corpus directory with manifest.tsv")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--baseline", action="store_true", help="empty deformable schedule (plain ConvLSTM)")
    p.add_argument("--log", default=None, help="per-epoch log file (appended)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--kernel", default="all", choices=("all",) + gradcheck.KERNELS)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="plain vs deformable ConvLSTM over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2], help="e.g. 0,1,2")

    p = sub.add_parser("inspect", help="print a checkpoint's config and parameters")
    p.add_argument("--ckpt", required=True)
    return parser


def cmd_synth(args) -> int:
    h, w = args.size
    clips = data.synth_dataset(args.clips, args.classes, args.frames, h, w, args.seed, args.channels)
    if args.augment:
        clips = data.augment_corpus(clips, args.augment, np.random.default_rng(args.seed))
    manifest = data.write_corpus(args.out, clips)
    print(f"clips: {len(clips)}")
    print(f"manifest: {manifest}")
    return 0


def _split(args):
    model_cfg, train_cfg = load_config(args.config)
    clips = data.read_corpus(args.data)
    train, val = data.train_val_split(clips, train_cfg.val_fraction, train_cfg.seed, train_cfg.grouped_split)
    log.info("split: %d train / %d val", len(train), len(val))
    return model_cfg, train_cfg, train, val


def cmd_train(args) -> int:
    model_cfg, train_cfg, train, val = _split(args)
    if args.baseline:
        model_cfg.deformable_per_mark = 0
    params = build(model_cfg)
    history = fit(params, train, val, train_cfg, log_path=args.log, checkpoint_path=args.out)
    last = history[-1] if history else {}
    print(f"epochs: {len(history)}")
    for key in ("train_loss", "train_acc", "val_loss", "val_acc"):
        if key in last:
            print(f"{key}: {last[key]:.6f}")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    print(evaluate(params, data.read_corpus(args.data)).format())
    return 0


def cmd_gradcheck(args) -> int:
    kernels = gradcheck.KERNELS if args.kernel == "all" else (args.kernel,)
    ok = True
    for name in kernels:
        for dtype in (np.float32, np.float64):
            err = gradcheck.run(name, args.trials, args.seed, dtype)
            limit = gradcheck.THRESHOLD[dtype]
            passed = err < limit
            ok &= passed
            print(f"{name}[{np.dtype(dtype).name}]: max_rel_err {err:.3e} {'<' if passed else '>='} {limit:g}")
    if ok:
        print("max_rel_err < 1e-3")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    model_cfg, train_cfg, train, val = _split(args)
    print(format_ablation(run_ablation(train, val, model_cfg, train_cfg, args.seeds)))
    return 0


def cmd_inspect(args) -> int:
    params = load_checkpoint(args.ckpt)
    for line in params.config.dumps().splitlines():
        k, v = line.split("=", 1)
        print(f"config.{k}: {v}")
    for name, v in params.items():
        print(f"param.{name}: {'x'.join(str(d) for d in v.shape)}")
    print(f"param_count: {param_count(params)}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def _configure_logging():
    level = os.environ.get("DCLSTM_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ValueError(f"DCLSTM_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on bad flags
    try:
        _configure_logging()
        if args.threads is not None and args.threads < 1:
            raise ValueError("--threads must be >= 1")
        if args.threads is None:
            limit = nullcontext()
        else:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=args.threads)
        with limit:
            return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"dclstm {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
