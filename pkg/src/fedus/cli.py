"""``fedus`` command line: synth, preprocess, train, generate, eval, usecase, report.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or bad
data, 4 model or checkpoint error, 5 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import model as fm
from . import pipeline as pl
from .autograd import ShapeError as GraphShapeError
from .config import load_config, parse_overrides
from .metrics import MetricError
from .model import CheckpointError, ConfigError, TrainingDiverged
from .preprocess import AnnotationError
from .signal_core import SignalError, Waveform, minmax, read_waveform_csv, resample, write_waveform_csv
from .usecase import UseCaseError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_INTERNAL = 0, 2, 3, 4, 5

log = logging.getLogger("fedus")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="fedus", description="FECG to Doppler ultrasound beat generation pipeline")
    p.add_argument("--version", action="version",
                   version=f"fedus {__version__} (checkpoint format {fm.CHECKPOINT_VERSION})")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="write a synthetic paired dataset")
    sub.add_parser("preprocess", parents=[common], help="filter, align and cut beat pairs")
    t = sub.add_parser("train", parents=[common], help="train one model, or one per held-out subject")
    t.add_argument("--loso", action="store_true", help="leave-one-subject-out: one model per subject")
    t.add_argument("--fold", action="append", metavar="SUBJECT", help="restrict --loso to these subjects")
    g = sub.add_parser("generate", parents=[common], help="generate DUS beats")
    g.add_argument("--checkpoint", type=Path, help="single-input mode: model checkpoint")
    g.add_argument("--input", type=Path, help="single-input mode: FECG beat CSV starting at an R peak")
    g.add_argument("--output", type=Path, help="single-input mode: DUS CSV to write")
    e = sub.add_parser("eval", parents=[common], help="similarity metrics per fold")
    e.add_argument("--generated", type=Path, help="evaluate this beat archive instead of the fold models")
    sub.add_parser("usecase", parents=[common], help="FHR agreement on stitched segments")
    sub.add_parser("report", parents=[common], help="collect tables into report.md")
    return p


def _single_generate(args) -> int:
    if not (args.checkpoint and args.input and args.output):
        raise ConfigError("single-input mode needs --checkpoint, --input and --output together")
    params = fm.load(args.checkpoint)
    w = read_waveform_csv(args.input)
    if w.fs != 250.0:
        w = resample(w, 250.0)
    x = w.samples[: params.arch.L_in]
    if x.size < 2 or not x.max() > x.min():
        raise SignalError("input beat is too short or constant")
    inp = np.zeros(params.arch.L_in)
    inp[: x.size] = minmax(x)
    y = fm.forward(params, inp).astype(np.float64)
    write_waveform_csv(Waveform(y, 8 * 250.0), args.output)
    log.info("wrote %d DUS samples to %s", y.size, args.output)
    return EXIT_OK


def _run(args) -> int:
    cfg = load_config(args.config, parse_overrides(args.set))
    cmd = args.command
    if cmd == "synth":
        pl.run_synth(cfg)
    elif cmd == "preprocess":
        pl.run_preprocess(cfg, args.jobs)
    elif cmd == "train":
        if args.fold and not args.loso:
            raise ConfigError("--fold only applies with --loso")
        pl.run_train(cfg, loso=args.loso, folds=args.fold, jobs=args.jobs)
    elif cmd == "generate":
        if args.checkpoint or args.input or args.output:
            return _single_generate(args)
        pl.run_generate(cfg)
    elif cmd == "eval":
        pl.run_eval(cfg, generated=args.generated, jobs=args.jobs)
    elif cmd == "usecase":
        pl.run_usecase_stage(cfg, args.jobs)
    elif cmd == "report":
        print(pl.run_report(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        log.error("--jobs must be >= 1")
        return EXIT_CONFIG
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (pl.DataError, AnnotationError, SignalError, MetricError, UseCaseError, FileNotFoundError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    except (CheckpointError, fm.ShapeError, GraphShapeError, TrainingDiverged) as exc:
        log.error("model: %s", exc)
        return EXIT_MODEL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
