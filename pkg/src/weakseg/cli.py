"""Command-line entry point: ``weakseg {generate,train,infer,sweep,verify}``.

Failures print one machine-parsable line to stderr,

    weakseg: error: code=<code> message=<text>

and exit nonzero: 2 usage/config, 3 data or I/O, 4 checkpoint, 1 failed
verification checks.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .config import ConfigError, load_config
from .data import (
    NetpbmError,
    class_counts,
    ensure_writable_dir,
    generate_dataset,
    read_dataset,
    read_image,
    split,
    write_color_mask,
    write_dataset,
    write_mask,
)
from .distributions import InvalidInputError
from .kernels import FeatureImage
from .meanfield import refine_with_meanfield
from .model import CheckpointError, TrainLog, forward, load_checkpoint, save_checkpoint
from .neighborhood import NeighborhoodMode
from .pipeline import run_sweep, run_training, sweep_header, sweep_row
from .verify import SUITES, run_suite, write_rows

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _fail(code, message, exit_code):
    raise CliError(code, message, exit_code)


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "lam", None) is not None:
        out.setdefault("loss", {})["lambda"] = args.lam
    if getattr(args, "mode", None) is not None:
        out.setdefault("loss", {})["mode"] = args.mode
    if getattr(args, "steps", None) is not None:
        out.setdefault("train", {})["total_steps"] = args.steps
    if getattr(args, "seed", None) is not None and args.command in ("train", "sweep"):
        out.setdefault("train", {})["seed"] = args.seed
    return out


def _config(args):
    path = getattr(args, "config", None)
    return load_config(path, _overrides(args))


def _load_split(args, cfg):
    data = Path(args.data)
    if not data.is_dir():
        _fail("missing_data", f"dataset directory {data} does not exist", EXIT_DATA)
    scenes = read_dataset(data)
    if not scenes:
        _fail("empty_dataset", f"dataset {data} has no scenes", EXIT_DATA)
    bad = [s for s in scenes if s.labels.num_classes != cfg.data.num_classes]
    if bad:
        _fail("class_mismatch", f"dataset has {bad[0].labels.num_classes} classes, config expects {cfg.data.num_classes}", EXIT_DATA)
    return split(scenes, cfg.val_fraction)


def _write_log(path, log: TrainLog):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TrainLog.CSV_HEADER)
        for row in log.rows():
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    data_cfg = cfg.data if args.size is None else type(cfg.data)(**{**cfg.data.__dict__, "size": args.size})
    out = ensure_writable_dir(args.out)
    scenes = generate_dataset(args.count, args.seed, data_cfg)
    write_dataset(out, scenes)
    counts = class_counts(scenes, data_cfg.num_classes)
    print("class,count")
    for c in range(1, data_cfg.num_classes):
        print(f"{c},{counts[c]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, val_set = _load_split(args, cfg)
    out = Path(args.out)
    ensure_writable_dir(out.parent if str(out.parent) else ".")

    def progress(rec):
        if args.verbose and (rec.step % 50 == 0 or rec.step == cfg.train.total_steps - 1):
            print(f"step {rec.step} total {rec.total:.4f} class {rec.class_loss:.4f} neighb {rec.neighb_loss:.4f}", file=sys.stderr)

    res = run_training(cfg, train_set, val_set, callback=progress)
    save_checkpoint(out, res.model)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    _write_log(log_path, res.log)
    print(f"checkpoint,{out}")
    print(f"log,{log_path}")
    print(f"lambda,{res.lam}")
    print(f"mode,{res.mode}")
    print(f"train_scenes,{len(train_set)}")
    print(f"val_scenes,{len(val_set)}")
    print(f"val_miou,{res.miou!r}")
    return EXIT_OK


DEFAULT_POSTPROCESS_ITERS = 5


def _parse_postprocess(text):
    if text is None:
        return DEFAULT_POSTPROCESS_ITERS
    kind, _, count = text.partition(":")
    if kind != "meanfield" or not count.isdigit():
        _fail("bad_flag", f"--postprocess expects meanfield:K, got {text!r}", EXIT_USAGE)
    return int(count)


def cmd_infer(args) -> int:
    cfg = _config(args)
    iters = _parse_postprocess(args.postprocess)
    model = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    logits = forward(model, image)
    q = refine_with_meanfield(logits, cfg.kernel, FeatureImage.from_image(image), iters, cfg.loss.filter_method)
    mask = np.argmax(q, axis=-1).astype(np.uint8)
    ensure_writable_dir(Path(args.out).parent if str(Path(args.out).parent) else ".")
    write_mask(args.out, mask)
    if args.color:
        write_color_mask(args.color, mask)
    print(f"mask,{args.out}")
    return EXIT_OK


def _parse_lambdas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        _fail("bad_flag", f"--lambdas must be comma-separated numbers, got {text!r}", EXIT_USAGE)
    if not values or any(v < 0 or not np.isfinite(v) for v in values):
        _fail("bad_flag", "--lambdas needs at least one finite nonnegative value", EXIT_USAGE)
    return values


def cmd_sweep(args) -> int:
    cfg = _config(args)
    lambdas = _parse_lambdas(args.lambdas)
    mode = NeighborhoodMode.parse(args.mode or cfg.loss.mode)
    train_set, val_set = _load_split(args, cfg)
    if not val_set:
        _fail("no_validation", "sweep needs a held-out split (data.val_fraction > 0)", EXIT_USAGE)
    results = run_sweep(cfg, train_set, val_set, lambdas, mode, args.jobs)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(sweep_header(cfg.data.num_classes))
        for res in sorted(results, key=lambda r: r.lam):
            writer.writerow([repr(float(v)) for v in sweep_row(res)])
    means = [r.miou for r in results]
    print(f"sweep,{args.out}")
    print(f"mode,{mode.value}")
    print(f"miou_variance,{float(np.var(means))!r}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows, seconds = run_suite(args.suite, seed=args.seed)
    if args.out:
        write_rows(args.out, rows)
    else:
        write_rows(sys.stdout, rows)
    failed = [r for r in rows if r.status == "fail"]
    xfailed = [r for r in rows if r.status == "xfail"]
    print(
        f"suite={args.suite} cases={len(rows)} failed={len(failed)} expected_failures={len(xfailed)} seconds={seconds:.1f}",
        file=sys.stderr,
    )
    return EXIT_CHECKS_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weakseg", description="Weakly supervised segmentation losses, mean-field tools and a desk-scale trainer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({_accel.backend()} backend)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=None, help="scene side in pixels (default from config)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train TinyFcn on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="training log CSV (default: <out>.log.csv)")
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--mode", choices=[m.value for m in NeighborhoodMode], default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output PGM mask")
    i.add_argument("--color", default=None, help="optional colour-coded PPM")
    i.add_argument("--postprocess", default=None, help="meanfield:K mean-field refinement steps (default meanfield:5; meanfield:0 = raw argmax)")
    i.add_argument("--config", default=None)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep", help="train once per lambda and report held-out mIoU")
    s.add_argument("--data", required=True)
    s.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    s.add_argument("--mode", choices=[m.value for m in NeighborhoodMode], default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run a numerical verification suite")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--out", default=None, help="CSV path (default: stdout)")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        err = exc
    except ConfigError as exc:
        err = CliError("config", str(exc), EXIT_USAGE)
    except CheckpointError as exc:
        err = CliError("checkpoint", str(exc), EXIT_CHECKPOINT)
    except NetpbmError as exc:
        err = CliError("image_format", str(exc), EXIT_DATA)
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        err = CliError("io", str(exc), EXIT_DATA)
    except InvalidInputError as exc:
        err = CliError("invalid_input", str(exc), EXIT_DATA)
    message = " ".join(str(err).split())
    print(f"weakseg: error: code={err.code} message={message}", file=sys.stderr)
    return err.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
