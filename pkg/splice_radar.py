#!/usr/bin/env python3
"""
SpliceRadar Command Line
Corpus synthesis, surrogate training, splice localization, evaluation,
step-size sweeps and self-verification behind one executable.
"""

import argparse
import logging
import logging.handlers
import os
import sys
import traceback
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_manager import ConfigManager, env_log_dir, env_workers, load_environment
from lib.checkpoint import checkpoint_digest, load_checkpoint
from lib.corpus import CorpusBuilder, build_splice_set, load_corpus, load_source_images
from lib.errors import NumericError, ParameterError, SpliceRadarError
from lib.image_io import SUPPORTED_SUFFIXES, load_image, save_image
from lib.localizer import DEFAULT_RESTARTS, DEFAULT_STEP, MORPHOLOGY_MODES, Localizer, save_heat_map, save_raw_map
from lib.metrics import (MASK_SUFFIXES, THRESHOLD_MODES, DatasetEvaluator, DatasetResult, format_table,
                         index_dir, load_mask_file)
from lib.trainer import Trainer
from lib.verify import run_self_check
from utils_cache import FeatureCache
from utils_files import atomic_write_json, atomic_write_text
from utils_time import Stopwatch, format_datetime_utc, format_duration, get_log_filename, get_utc_now

LOGGER_NAME = "splice_radar"
SWEEP_STEPS = "24,36,48,60,72"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_INTERRUPTED = 130


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False) -> logging.Logger:
    """Console handler on stderr plus an optional rotating log file"""
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.handlers.clear()
    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    root.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, get_log_filename(LOGGER_NAME)),
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding='utf-8',
        )
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    return logging.getLogger(LOGGER_NAME)


class _Parser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting so they map onto the input-error exit code"""

    def error(self, message: str):
        raise ParameterError(f"{self.prog}: {message}")


def _steps(text: str) -> List[int]:
    try:
        steps = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid step list {text!r}")
    if not steps:
        raise argparse.ArgumentTypeError("step list is empty")
    return steps


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--workers', type=int, default=None, help='Parallel workers (default: $SR_WORKERS or 1)')
    common.add_argument('--seed', type=int, default=None, help='Random seed (default: 0, or the config value)')
    common.add_argument('--log-dir', default=None, help='Also write rotating logs here (default: $SR_LOG_DIR)')
    common.add_argument('--verbose', action='store_true', help='Debug-level logging')

    localize_opts = _Parser(add_help=False)
    localize_opts.add_argument('--model', required=True, help='Checkpoint file')
    localize_opts.add_argument('--restarts', type=int, default=DEFAULT_RESTARTS, help='EM restarts (default: 100)')
    localize_opts.add_argument('--morphology', choices=MORPHOLOGY_MODES, default='opening')
    localize_opts.add_argument('--no-standardize', action='store_true', help='Fit EM on raw FC2 features')

    scoring_opts = _Parser(add_help=False)
    scoring_opts.add_argument('--images', help='Directory of test images')
    scoring_opts.add_argument('--masks', required=True, help='Directory of ground-truth masks')
    scoring_opts.add_argument('--out', required=True, help='Output directory')
    scoring_opts.add_argument('--threshold-mode', choices=THRESHOLD_MODES, default='per-image')

    parser = _Parser(prog='splice_radar', description='Blind image splice localization')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help='Synthesize a camera-model corpus')
    synth.add_argument('--out', required=True)
    synth.add_argument('--models', type=int, default=4)
    synth.add_argument('--images-per-model', type=int, default=200)
    synth.add_argument('--size', type=int, default=256)
    synth.add_argument('--sources', default=None, help='Directory of clean source PNGs')
    synth.add_argument('--splices', type=int, default=0, help='Also write N host/donor splices to OUT/splices')
    synth.add_argument('--splice-size', type=int, default=None, help='Splice image size (default: --size)')
    synth.add_argument('--force', action='store_true', help='Write into a non-empty directory')

    train = sub.add_parser('train', parents=[common], help='Train on a corpus')
    train.add_argument('--data', required=True, help='Corpus root (contains corpus.json)')
    train.add_argument('--config', default=None, help='Flat key=value configuration file')
    train.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
    train.add_argument('--out', required=True)

    localize = sub.add_parser('localize', parents=[common, localize_opts], help='Localize splices in one image')
    localize.add_argument('--image', required=True)
    localize.add_argument('--step', type=int, default=DEFAULT_STEP)
    localize.add_argument('--out', required=True, help='Heat-map PNG path')
    localize.add_argument('--raw', action='store_true', help='Also write an SRMAP1 raw map next to the PNG')
    localize.add_argument('--mask-threshold', type=float, default=None,
                          help='Also write a binary mask PNG thresholded at this probability')

    evaluate = sub.add_parser('evaluate', parents=[common, scoring_opts], help='Localize and score a dataset')
    evaluate.add_argument('--model', default=None, help='Checkpoint file')
    evaluate.add_argument('--maps', default=None, help='Score existing maps instead of running the model')
    evaluate.add_argument('--step', type=int, default=DEFAULT_STEP)
    evaluate.add_argument('--restarts', type=int, default=DEFAULT_RESTARTS)
    evaluate.add_argument('--morphology', choices=MORPHOLOGY_MODES, default='opening')
    evaluate.add_argument('--no-standardize', action='store_true')

    sweep = sub.add_parser('sweep', parents=[common, scoring_opts, localize_opts], help='Evaluate several steps')
    sweep.add_argument('--steps', type=_steps, default=_steps(SWEEP_STEPS))

    verify = sub.add_parser('verify', parents=[common], help='Run the self-check suites')
    verify.add_argument('--quick', action='store_true', help='Smaller randomized suites')
    return parser


def _echo(logger: logging.Logger, args: argparse.Namespace, extra: Optional[Dict] = None) -> None:
    values = {k: v for k, v in vars(args).items() if k != 'command'}
    values.update(extra or {})
    logger.info(f"⚙️ {args.command}: {ConfigManager.describe(values)}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, logger: logging.Logger) -> int:
    args.seed = 0 if args.seed is None else args.seed
    _echo(logger, args)
    sources = load_source_images(args.sources, args.size) if args.sources else None
    builder = CorpusBuilder(args.out, args.models, args.images_per_model, args.size, args.seed,
                            workers=args.workers, sources=sources, force=args.force, logger=logger)
    corpus = builder.build()
    if args.splices > 0:
        splice_size = args.splice_size or args.size
        build_splice_set(os.path.join(args.out, 'splices'), corpus.models, args.splices, splice_size,
                         args.seed, sources=load_source_images(args.sources, splice_size) if sources else None)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, logger: logging.Logger) -> int:
    manager = ConfigManager(logger=logger)
    overrides = manager.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides['seed'] = args.seed
    config = manager.resolve(args.config, overrides)
    _echo(logger, args, {f"config.{k}": v for k, v in config.to_dict().items()})
    corpus = load_corpus(args.data)
    report = Trainer(config, corpus, args.out, logger=logger).train()
    final = report.final
    if final is not None:
        logger.info(f"📊 Final epoch {final.epoch}: val_acc={final.val_accuracy:.3f}, rf={final.rf:.4f}")
    return EXIT_OK


def _localizer(args: argparse.Namespace, logger: logging.Logger, step: int,
               cache: Optional[FeatureCache] = None) -> Localizer:
    checkpoint = load_checkpoint(args.model)
    return Localizer(checkpoint.params, step=step, restarts=args.restarts, seed=args.seed,
                     workers=args.workers, morphology=args.morphology, standardize=not args.no_standardize,
                     cache=cache, model_digest=checkpoint_digest(args.model), logger=logger)


def cmd_localize(args: argparse.Namespace, logger: logging.Logger) -> int:
    args.seed = 0 if args.seed is None else args.seed
    if args.mask_threshold is not None and not 0.0 <= args.mask_threshold <= 1.0:
        raise ParameterError(f"--mask-threshold must lie in [0, 1], got {args.mask_threshold}")
    _echo(logger, args)
    image = load_image(args.image)
    prob_map = _localizer(args, logger, args.step).localize(image)
    save_heat_map(prob_map, args.out)
    if args.raw:
        save_raw_map(prob_map, os.path.splitext(args.out)[0] + '.srmap')
    if args.mask_threshold is not None:
        mask_path = os.path.splitext(args.out)[0] + '_mask.png'
        save_image(prob_map.binary_mask(args.mask_threshold).astype(np.float32), mask_path)
        logger.info(f"🎭 Binary mask at threshold {args.mask_threshold:g} written to {mask_path}")
    logger.info(f"✅ Heat map {image.height}×{image.width} written to {args.out}")
    return EXIT_OK


def _localized_pairs(localizer: Localizer, images: Dict[str, str], masks: Dict[str, str], maps_dir: str,
                     logger: logging.Logger) -> Tuple[List[Tuple[str, np.ndarray, np.ndarray]], List[str]]:
    unmatched = sorted([f"image:{s}" for s in images if s not in masks] + [f"mask:{s}" for s in masks if s not in images])
    for entry in unmatched:
        logger.warning(f"⚠️ Unmatched file {entry}")
    items = []
    for stem in sorted(s for s in images if s in masks):
        prob_map = localizer.localize(load_image(images[stem]))
        save_raw_map(prob_map, os.path.join(maps_dir, f"{stem}.srmap"))
        items.append((stem, prob_map.values, load_mask_file(masks[stem])))
    return items, unmatched


def _write_results(out_dir: str, step: int, result: DatasetResult, logger: logging.Logger) -> Dict:
    row = {"step": step, **result.means()}
    payload = result.to_json()
    payload["summary"]["step"] = step
    atomic_write_json(os.path.join(out_dir, 'results.json'), payload)
    table = format_table([row])
    atomic_write_text(os.path.join(out_dir, 'table.txt'), table + "\n")
    logger.info("📊 Results\n" + table)
    return row


def _evaluate_step(args: argparse.Namespace, logger: logging.Logger, step: int, out_dir: str,
                   cache: Optional[FeatureCache] = None) -> Dict:
    evaluator = DatasetEvaluator(args.threshold_mode, args.workers, logger=logger)
    if getattr(args, 'maps', None):
        result = evaluator.evaluate_dirs(args.maps, args.masks)
    else:
        if not args.model or not args.images:
            raise ParameterError("evaluation needs --model and --images (or --maps)")
        items, unmatched = _localized_pairs(_localizer(args, logger, step, cache),
                                            index_dir(args.images, SUPPORTED_SUFFIXES),
                                            index_dir(args.masks, MASK_SUFFIXES),
                                            os.path.join(out_dir, 'maps'), logger)
        result = evaluator.evaluate_pairs(items, unmatched)
    return _write_results(out_dir, step, result, logger)


def cmd_evaluate(args: argparse.Namespace, logger: logging.Logger) -> int:
    args.seed = 0 if args.seed is None else args.seed
    _echo(logger, args)
    _evaluate_step(args, logger, args.step, args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, logger: logging.Logger) -> int:
    args.seed = 0 if args.seed is None else args.seed
    _echo(logger, args)
    cache = FeatureCache(logger=logger)
    rows = [_evaluate_step(args, logger, step, os.path.join(args.out, f"step_{step}"), cache)
            for step in args.steps]
    table = format_table(rows)
    atomic_write_json(os.path.join(args.out, 'sweep.json'), {"rows": sorted(rows, key=lambda r: r["step"])})
    atomic_write_text(os.path.join(args.out, 'table.txt'), table + "\n")
    logger.info(cache.stats())
    logger.info("📊 Step sweep\n" + table)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, logger: logging.Logger) -> int:
    args.seed = 0 if args.seed is None else args.seed
    _echo(logger, args)
    results = run_self_check(quick=args.quick, seed=args.seed, log=logger)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"❌ Self-check failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    logger.info("✅ All self-check suites passed")
    return EXIT_OK


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'localize': cmd_localize,
    'evaluate': cmd_evaluate,
    'sweep': cmd_sweep,
    'verify': cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_environment()
    try:
        args = build_parser().parse_args(argv)
    except ParameterError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INPUT

    logger = setup_logging(args.log_dir or env_log_dir(), args.verbose)
    watch = Stopwatch()
    logger.info(f"🚀 splice_radar {args.command} started at {format_datetime_utc(get_utc_now())}")
    try:
        args.workers = args.workers if args.workers is not None else env_workers()
        if args.workers < 1:
            raise ParameterError(f"--workers must be at least 1, got {args.workers}")
        code = COMMANDS[args.command](args, logger)
    except KeyboardInterrupt:
        logger.info("⚠️ Interrupted by user")
        code = EXIT_INTERRUPTED
    except NumericError as e:
        logger.error(f"❌ Numeric failure: {e}")
        code = EXIT_NUMERIC
    except (SpliceRadarError, OSError, ValueError) as e:
        logger.error(f"❌ {e}")
        logger.debug(f"Traceback: {traceback.format_exc()}")
        code = EXIT_INPUT
    logger.info(f"🏁 {args.command} finished at {format_datetime_utc(get_utc_now())} "
                f"in {format_duration(watch.elapsed())} (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
