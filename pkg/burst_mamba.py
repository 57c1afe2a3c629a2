"""
BurstMamba

Command-line entry point: generate synthetic bursts, train the two-branch
model, super-resolve a burst, sweep burst lengths, benchmark the scan kernel
against quadratic attention and run the invariant self-check.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import config  # noqa: E402
from src import build_id  # noqa: E402
from src.benchmark import run_benchmark  # noqa: E402
from src.exceptions import (  # noqa: E402
    BurstMambaError,
    CheckpointError,
    NonFiniteError,
    ShapeError,
    TensorFormatError,
    TrainingAborted,
    ValidationError,
)
from src.image_io import write_ppm  # noqa: E402
from src.metrics import psnr, ssim  # noqa: E402
from src.model import BurstMambaModel, ModelConfig, load_checkpoint  # noqa: E402
from src.report_generator import ReportGenerator  # noqa: E402
from src.selfcheck import format_table, run_selfcheck  # noqa: E402
from src.synthetic_data import BurstDataset, DegradationConfig, read_sample, write_dataset  # noqa: E402
from src.tensor_io import save_array  # noqa: E402
from src.trainer import TrainConfig, Trainer, evaluate, predict  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def setup_logging(log_file: Optional[str] = None, level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file or config.LOG_FILE),
            logging.StreamHandler()
        ],
        force=True
    )


def int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="burst_mamba",
        description="BurstMamba burst super-resolution at desk scale")
    parser.add_argument("--version", action="version", version=build_id())
    parser.add_argument("--log-file", default=config.LOG_FILE, help="Log file path")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a synthetic burst dataset")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, default=config.DATASET_COUNT, help="Number of bursts")
    gen.add_argument("--size", type=int, nargs=2, default=list(config.LR_SIZE), metavar=("H", "W"),
                     help="LR frame size")
    gen.add_argument("--burst", type=int, default=config.BURST_LEN, help="Burst length L")
    gen.add_argument("--shift-max", type=float, default=config.SHIFT_MAX, help="Maximum shift in HR pixels")
    gen.add_argument("--noise", type=float, default=config.NOISE_SIGMA, help="Gaussian noise sigma")
    gen.add_argument("--mosaic", action="store_true", help="Emit 1-channel RGGB frames")
    gen.add_argument("--downsample", choices=["box", "bicubic"], default=config.DOWNSAMPLE)
    gen.add_argument("--frequency", type=float, default=config.FREQUENCY, help="Texture frequency scale")
    gen.add_argument("--seed", type=int, default=config.SEED, help="Manifest seed")
    gen.add_argument("--workers", type=int, default=1, help="Generation threads")

    train = commands.add_parser("train", help="Two-stage training")
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--out", required=True, help="Checkpoint directory")
    train.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    train.add_argument("--stage1", type=int, help="Stage 1 (detached) steps")
    train.add_argument("--stage2", type=int, help="Stage 2 (full model) steps")
    train.add_argument("--seed", type=int, help="Seed for initialization and batch sampling")

    infer = commands.add_parser("infer", help="Super-resolve one burst")
    infer.add_argument("--ckpt", required=True, help="Checkpoint directory")
    infer.add_argument("--burst", required=True, help="Burst directory (lr_burst.nt, flow_XX.nt)")
    infer.add_argument("--out", required=True, help="Output PPM path")
    infer.add_argument("--config", help="Expected model config; any mismatch with the checkpoint is an error")
    infer.add_argument("--detached", action="store_true", help="Keyframe-only inference")
    infer.add_argument("--length", type=int, help="Use only the first L frames")
    infer.add_argument("--compare-length", type=int,
                       help="Also run with this many frames and write difference reports")

    ev = commands.add_parser("eval", help="PSNR/SSIM over burst lengths")
    ev.add_argument("--ckpt", required=True, help="Checkpoint directory")
    ev.add_argument("--data", required=True, help="Dataset directory")
    ev.add_argument("--lengths", type=int_list, default=[1, 2, 5, 8], help="Comma-separated lengths, 0 = detached")
    ev.add_argument("--out", required=True, help="Output CSV")
    ev.add_argument("--config", help="Expected model config")
    ev.add_argument("--zero-flows", action="store_true", help="Force all flows to zero")

    bench = commands.add_parser("bench", help="Scan vs attention timing")
    bench.add_argument("--lengths", type=int_list, default=list(config.BENCH_LENGTHS))
    bench.add_argument("--reps", type=int, default=config.BENCH_REPS)
    bench.add_argument("--channels", type=int, default=config.BENCH_CHANNELS)
    bench.add_argument("--out", required=True, help="Output CSV")

    check = commands.add_parser("selfcheck", help="Run the invariant suite")
    check.add_argument("--seed", type=int, default=0)

    return parser.parse_args(argv)


def load_config_file(path: Optional[str]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Model and train sections of a JSON config file (both optional)."""
    if not path:
        return {}, {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}") from e
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ValidationError(f"config file {path}: unknown sections {unknown}")
    return dict(data.get("model", {})), dict(data.get("train", {}))


def expected_model_config(path: Optional[str]) -> Optional[ModelConfig]:
    model_section, _ = load_config_file(path)
    return ModelConfig.from_dict(model_section) if path else None


def run_gen_data(args: argparse.Namespace) -> int:
    degradation = DegradationConfig(shift_max=args.shift_max, noise_sigma=args.noise, mosaic=args.mosaic,
                                    downsample=args.downsample, frequency=args.frequency)
    write_dataset(args.out, args.count, tuple(args.size), args.burst, degradation, seed=args.seed,
                  workers=args.workers)
    return EXIT_OK


def run_train(args: argparse.Namespace) -> int:
    model_section, train_section = load_config_file(args.config)
    if args.stage1 is not None:
        train_section["stage1_steps"] = args.stage1
    if args.stage2 is not None:
        train_section["stage2_steps"] = args.stage2
    if args.seed is not None:
        model_section["seed"] = args.seed
        train_section["seed"] = args.seed
    dataset = BurstDataset(args.data)
    model_config = ModelConfig.from_dict(model_section)
    if model_config.input_mode == "rgb3" and dataset.manifest.degradation.mosaic:
        model_config = ModelConfig.from_dict({**model_config.to_dict(), "input_mode": "rggb1"})
        logger.info("Dataset is mosaicked; using input_mode rggb1")
    model = BurstMambaModel(model_config)
    result = Trainer(model, dataset, TrainConfig.from_dict(train_section)).train(args.out)
    logger.info(f"Checkpoint sha256: {result.digest}")
    return EXIT_OK


def run_infer(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt, expected_model_config(args.config))
    sample = read_sample(args.burst, model.config.scale)
    length = args.length or sample.length
    prediction = predict(model, sample, length=length, detached=args.detached)
    write_ppm(args.out, prediction)
    stem = os.path.splitext(args.out)[0]
    save_array(prediction, f"{stem}.nt")
    logger.info(f"Wrote {args.out} and {stem}.nt ({prediction.shape[1]}x{prediction.shape[2]})")
    if sample.hr_target is not None:
        logger.info(f"PSNR {psnr(prediction, sample.hr_target):.3f} dB, SSIM {ssim(prediction, sample.hr_target):.4f}")

    if args.compare_length:
        report = ReportGenerator(os.path.dirname(os.path.abspath(args.out)))
        keyframe = sample.lr_burst[0]
        other = predict(model, sample, length=args.compare_length)
        report.generate_difference_report(prediction, other, keyframe, f"L={length}", f"L={args.compare_length}",
                                          stem=f"{os.path.basename(stem)}_vs_L{args.compare_length}")
        single = predict(model, sample, length=1, detached=True)
        report.generate_difference_report(prediction, single, keyframe, f"L={length}", "detached",
                                          stem=f"{os.path.basename(stem)}_vs_detached")
    return EXIT_OK


def run_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt, expected_model_config(args.config))
    dataset = BurstDataset(args.data)
    results = evaluate(model, dataset, args.lengths, zero_flows=args.zero_flows)
    report = ReportGenerator(os.path.dirname(os.path.abspath(args.out)))
    report.write_length_sweep(results, filename=os.path.abspath(args.out))
    stem = os.path.splitext(os.path.abspath(args.out))[0]
    for result in results:
        report.write_sample_metrics(result["samples"], filename=f"{stem}_samples_L{result['length']}.csv")
    return EXIT_OK


def run_bench(args: argparse.Namespace) -> int:
    rows = run_benchmark(args.lengths, args.reps, channels=args.channels)
    report = ReportGenerator(os.path.dirname(os.path.abspath(args.out)))
    report.write_bench(rows, filename=os.path.abspath(args.out), noisy=args.reps == 1)
    return EXIT_OK


def run_selfcheck_command(args: argparse.Namespace) -> int:
    results = run_selfcheck(seed=args.seed)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "bench": run_bench,
    "selfcheck": run_selfcheck_command,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (TrainingAborted, NonFiniteError)):
        return EXIT_NUMERICAL
    if isinstance(error, (ValidationError, ShapeError, CheckpointError, TensorFormatError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function to run BurstMamba; returns the process exit code."""
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_file, args.log_level)
    logger.info(f"Starting {args.command} ({build_id()})")
    try:
        code = COMMANDS[args.command](args)
        logger.info(f"{args.command} finished with exit code {code}")
        return code

    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        return EXIT_RUNTIME

    except TrainingAborted as e:
        logger.error(f"Training aborted: {e}; last good checkpoint: {e.checkpoint}", exc_info=True)
        return EXIT_NUMERICAL

    except (BurstMambaError, OSError) as e:
        logger.error(f"Error running {args.command}: {e}", exc_info=True)
        return exit_code_for(e)

    except Exception as e:
        logger.error(f"Unexpected error running {args.command}: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
