"""``hylog`` command line.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
Failures print a single ``hylog: error[<kind>]: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DivergenceError, FormatError
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def cmd_synth(a) -> int:
    from .data import generate_dataset

    m = generate_dataset(a.out, a.count, a.size, a.seed, a.test)
    print(f"wrote {len(m.split('train'))} train / {len(m.split('test'))} test samples to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .config import load_config
    from .data import read_manifest
    from .train import train

    run = load_config(a.config)
    if a.max_steps is not None:
        run.train.max_steps = a.max_steps
    bundle, rows = train(run, read_manifest(a.data), a.out, epochs=a.epochs, seed=a.seed)
    last = [r for r in rows if r.total is not None][-1]
    print(f"trained {bundle.step} steps, final loss {last.total:.6f}, checkpoint {Path(a.out) / 'final.hylg'}")
    return EXIT_OK


def cmd_infer(a) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, save_image
    from .network import forward
    from .train import network_from_bundle

    img = load_image(a.input)
    net, _ = network_from_bundle(load_checkpoint(a.checkpoint), image_size=img.shape[:2])
    net.eval()
    with no_grad():
        out = forward(Tensor(img[None].astype(np.float32)), net)
    dest = Path(a.output)
    save_image(dest, np.clip(out.dehazed.data[0], 0.0, 1.0))
    extra = []
    if a.emit_reflectance:
        extra.append(("reflectance", out.reflectance))
    if a.emit_shading:
        extra.append(("shading", out.shading))
    for name, t in extra:
        if t is None:
            raise FormatError(f"checkpoint has no {name} decoder")
        save_image(dest.with_name(f"{dest.stem}_{name}{dest.suffix}"), np.clip(t.data[0], 0.0, 1.0))
    print(f"wrote {dest} ({img.shape[0]}x{img.shape[1]})")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .data import read_manifest
    from .train import evaluate

    p, s = evaluate(a.checkpoint, read_manifest(a.data), a.split)
    print(f"split={a.split} psnr={p:.6f} ssim={s:.6f}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .checks import SUITES, gradcheck_suite

    if a.module is not None and a.module not in SUITES:
        raise UsageError(f"unknown module {a.module!r}; choose from {', '.join(SUITES)}")
    results = gradcheck_suite(a.module)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"hylog: error[gradcheck]: {len(failed)} failing: {','.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(a) -> int:
    from .bench import VARIANTS, bench, parse_size

    try:
        sizes = [parse_size(s) for s in a.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    variants = a.variants.split(",") if a.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant {bad[0]!r}; choose from {', '.join(VARIANTS)}")
    records = bench(variants, sizes, k=a.runs, g=a.grid, n_g=a.global_reduction, full=a.full,
                    workers=a.workers, csv_path=a.csv, timed=not a.no_time)
    for r in records:
        print(r.csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hylog", description="Hybrid local-global ViT dehazing toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic hazy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True, help="training samples")
    s.add_argument("--test", type=int, default=None, help="test samples (default count/8)")
    s.add_argument("--size", type=_size, required=True, help="HxW")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--config", required=True, help="key=value or JSON config file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--max-steps", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="dehaze one PPM image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--emit-reflectance", action="store_true", help="also write <out>_reflectance.ppm")
    s.add_argument("--emit-shading", action="store_true", help="also write <out>_shading.ppm")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", default=None)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench-attn", help="attention cost model and timing")
    s.add_argument("--sizes", required=True, help="comma list of HxW or HxWxC")
    s.add_argument("--csv", default=None)
    s.add_argument("--variants", default=None, help="comma list (default all)")
    s.add_argument("--runs", type=int, default=3)
    s.add_argument("--grid", type=int, default=8, help="windows per side")
    s.add_argument("--global-reduction", type=int, default=4, help="global token reduction (a square)")
    s.add_argument("--full", action="store_true", help="add projection and MLP MACs")
    s.add_argument("--workers", type=int, default=1, help="threads for local window evaluation")
    s.add_argument("--no-time", action="store_true", help="analytic columns only")
    s.set_defaults(fn=cmd_bench)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"hylog: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except FormatError as exc:
        return _fail("format", exc, EXIT_DATA)
    except (OSError, ShapeError, ValueError, KeyError, MemoryError) as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
