"""Command-line entry point: python cli.py <command> [options]

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from utils.checkpoint import load_checkpoint
from utils.config import get_runtime_settings, load_experiment_config
from utils.data_synth import generate_dataset
from utils.dataset_manager import (
    NORMALIZATION,
    compute_normalization,
    load_normalization,
    density_preview,
    read_dataset,
    read_image,
    read_split,
    save_normalization,
    write_dataset,
)
from utils.errors import NumericalError, TafnetError, ValidationError
from utils.gradient_suite import format_results, run_gradient_suite
from utils.metrics import format_report
from utils.tafnet import MODALITIES, build_tafnet
from utils.tensor_core import set_finite_checks
from utils.trainer import (
    CHECKPOINT_NAME,
    ablate,
    evaluate,
    format_ablation,
    predict_pair,
    prepare_split,
    save_training_outputs,
    train,
)

DROP_MODALITY_HELP = (
    "replace one modality by zeros (its training mean) in both the main-stream input and its auxiliary stream"
)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1)"""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _resolve_checkpoint(value: Optional[str]) -> Path:
    if not value:
        raise ValidationError("--checkpoint is required (or set TAFNET_CHECKPOINT)")
    path = Path(value)
    return path / CHECKPOINT_NAME if path.is_dir() else path


def _require_data(value: Optional[str]) -> Path:
    if not value:
        raise ValidationError("--data is required (or set TAFNET_DATA_DIR)")
    return Path(value)


def _checkpoint_normalization(checkpoint: Path, data: Optional[Path] = None):
    """Constants stored next to the checkpoint, else those of the dataset"""
    beside = checkpoint.parent / NORMALIZATION
    if beside.is_file() or data is None:
        return load_normalization(beside)
    return load_normalization(data / NORMALIZATION)


def cmd_generate_data(args) -> int:
    config = load_experiment_config(args.config, args.seed)
    out = Path(args.out)
    dataset = generate_dataset(config.synth, workers=args.workers)
    write_dataset(dataset, out)
    save_normalization(compute_normalization(dataset["train"]), out / NORMALIZATION)
    print(f"wrote {sum(len(v) for v in dataset.values())} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_experiment_config(args.config, args.seed)
    data = _require_data(args.data)
    stats = load_normalization(data / NORMALIZATION)
    dataset = read_dataset(data, ("train", "val"))
    train_split = prepare_split(dataset["train"], stats)
    val_split = prepare_split(dataset["val"], stats)

    out = Path(args.out)
    save_training_outputs(out, stats)
    model = build_tafnet(config.model, config.train.seed)
    result = train(model, train_split, val_split, config.train, out_dir=out)
    best = result.trace.best_epoch
    print(f"best epoch {best if best is not None else '-'}; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    data = _require_data(args.data)
    checkpoint = _resolve_checkpoint(args.checkpoint)
    model = load_checkpoint(checkpoint)
    stats = _checkpoint_normalization(checkpoint, data)
    split = prepare_split(read_split(data / args.split), stats)
    report = evaluate(model, split, drop_modality=args.drop_modality, workers=args.workers)
    sys.stdout.write(format_report(report))
    return 0


def _write_density(density: np.ndarray, out: Path, stem: str):
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(density_preview(density)).save(out / f"{stem}.density.pgm", format="PPM")
    rows = [" ".join(repr(float(v)) for v in row) for row in density]
    (out / f"{stem}.density.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")


def cmd_predict(args) -> int:
    checkpoint = _resolve_checkpoint(args.checkpoint)
    model = load_checkpoint(checkpoint)
    stats = _checkpoint_normalization(checkpoint)
    rgb = read_image(Path(args.rgb), 3)
    thermal = read_image(Path(args.thermal), 1)
    density = predict_pair(model, rgb, thermal, stats, drop_modality=args.drop_modality)
    stem = Path(args.rgb).name.split(".")[0]
    _write_density(density, Path(args.out), stem)
    print(f"count {float(density.sum())!r}")
    return 0


def cmd_grad_check(args) -> int:
    config = load_experiment_config(args.config, args.seed)
    base = args.seed if args.seed is not None else 0
    results = run_gradient_suite(config.model, seeds=range(base, base + args.seeds))
    sys.stdout.write(format_results(results))
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        raise NumericalError(f"gradient checks failed: {', '.join(failed)}")
    return 0


def cmd_ablate(args) -> int:
    config = load_experiment_config(args.config, args.seed)
    data = _require_data(args.data)
    stats = load_normalization(data / NORMALIZATION)
    dataset = read_dataset(data)
    splits = [prepare_split(dataset[name], stats) for name in ("train", "val", "test")]
    rows = ablate(config, *splits, out_dir=args.out)
    sys.stdout.write(format_ablation(rows))
    return 0


def build_parser(settings=None) -> argparse.ArgumentParser:
    settings = settings or get_runtime_settings()
    parser = ArgumentParser(prog="tafnet", description="RGB-T crowd counting at desk scale")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("generate-data", cmd_generate_data, "generate a synthetic dataset")
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--out", required=True, help="dataset directory to create")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--workers", type=int, default=1, help="generation threads")

    sub = command("train", cmd_train, "train a model and keep the best validation checkpoint")
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--data", default=settings.data_dir, help="dataset directory")
    sub.add_argument("--out", required=True, help="output directory for checkpoint and trace")
    sub.add_argument("--seed", type=int, help="override the config seed")

    sub = command("eval", cmd_eval, "evaluate a checkpoint on a split")
    sub.add_argument("--checkpoint", default=settings.checkpoint, help="checkpoint file or training output directory")
    sub.add_argument("--data", default=settings.data_dir, help="dataset directory")
    sub.add_argument("--split", default="test", choices=["train", "val", "test"])
    sub.add_argument("--drop-modality", choices=MODALITIES, help=DROP_MODALITY_HELP)
    sub.add_argument("--workers", type=int, default=1, help="evaluation threads")

    sub = command("predict", cmd_predict, "predict the density map of one image pair")
    sub.add_argument("--checkpoint", default=settings.checkpoint, help="checkpoint file or training output directory")
    sub.add_argument("--rgb", required=True, help="RGB image (PPM)")
    sub.add_argument("--thermal", required=True, help="thermal image (PGM)")
    sub.add_argument("--out", default=".", help="directory for the density map files")
    sub.add_argument("--drop-modality", choices=MODALITIES, help=DROP_MODALITY_HELP)

    sub = command("grad-check", cmd_grad_check, "run the finite-difference gradient suite")
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--seed", type=int, help="first seed")
    sub.add_argument("--seeds", type=int, default=10, help="number of seeds per check")

    sub = command("ablate", cmd_ablate, "train baseline, iim_no_attn and full with a shared seed")
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--data", default=settings.data_dir, help="dataset directory")
    sub.add_argument("--out", help="directory for per-variant checkpoints and traces")
    sub.add_argument("--seed", type=int, help="override the config seed")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        settings = get_runtime_settings()
        logging.basicConfig(
            level=getattr(logging, settings.log_level, logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        set_finite_checks(settings.check_finite)
        args = build_parser(settings).parse_args(argv)
        return args.handler(args)
    except TafnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
