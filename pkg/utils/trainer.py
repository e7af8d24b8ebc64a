"""Training loop, evaluation driver and the variant ablation"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from utils.checkpoint import save_checkpoint
from utils.config import ExperimentConfig, LossKind, TrainConfig, Variant
from utils.data_synth import ScenePair
from utils.dataset_manager import NORMALIZATION, NormalizationStats, normalize, normalize_images, save_normalization
from utils.errors import DatasetError, NumericalError, ValidationError
from utils.losses import bayesian_loss, mse_loss
from utils.metrics import EvalReport, build_report, compare_reports, mae, score_image
from utils.optimizer import AdamState, adam_step
from utils.tafnet import DENSITY_STRIDE, build_tafnet, forward
from utils.tensor_core import GradTape, ModelParams, Tensor

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "train_loss", "val_game0", "val_rmse", "best")
CHECKPOINT_NAME = "best.ckpt"
TRACE_NAME = "trace.tsv"


@dataclass
class PreparedSplit:
    """Normalized arrays of one split, ready for batching"""

    ids: List[str]
    illuminations: List[str]
    rgb: np.ndarray  # (n, 3, H, W)
    thermal: np.ndarray  # (n, 1, H, W)
    points: List[np.ndarray]

    def __len__(self):
        return len(self.ids)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.points], dtype=np.float64)


def prepare_split(pairs: Sequence[ScenePair], stats: NormalizationStats) -> PreparedSplit:
    if not pairs:
        raise ValidationError("cannot prepare an empty split")
    normalized = [normalize(p, stats) for p in pairs]
    return PreparedSplit(
        ids=[p.id for p in pairs],
        illuminations=[p.illumination for p in pairs],
        rgb=np.stack([rgb for rgb, _ in normalized]),
        thermal=np.stack([thermal for _, thermal in normalized]),
        points=[np.asarray(p.points, dtype=np.float64).reshape(-1, 2) for p in pairs],
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_game0: Optional[float] = None
    val_rmse: Optional[float] = None
    best: bool = False


@dataclass
class TrainTrace:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> Optional[int]:
        return select_best(self.records)


@dataclass
class TrainResult:
    model: ModelParams
    trace: TrainTrace


def select_best(records: Sequence[EpochRecord]) -> Optional[int]:
    """Epoch with the lowest validation GAME(0); ties go to the earlier epoch"""
    best = None
    for record in records:
        if record.val_game0 is None:
            continue
        if best is None or record.val_game0 < best.val_game0:
            best = record
    return best.epoch if best is not None else None


def _format_value(value: Optional[float]) -> str:
    return "-" if value is None else format(value, ".17g")


def format_trace(trace: TrainTrace) -> str:
    lines = ["\t".join(TRACE_COLUMNS)]
    for r in trace.records:
        lines.append("\t".join([
            str(r.epoch),
            _format_value(r.train_loss),
            _format_value(r.val_game0),
            _format_value(r.val_rmse),
            "1" if r.best else "0",
        ]))
    return "\n".join(lines) + "\n"


def write_trace(trace: TrainTrace, path) -> Path:
    path = Path(path)
    path.write_text(format_trace(trace), encoding="utf-8")
    return path


def _parse_value(value: str) -> Optional[float]:
    return None if value == "-" else float(value)


def read_trace(path) -> TrainTrace:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(path, "training trace not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != TRACE_COLUMNS:
        raise DatasetError(path, f"expected header {' '.join(TRACE_COLUMNS)}", 1)
    trace = TrainTrace()
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(TRACE_COLUMNS):
            raise DatasetError(path, f"expected {len(TRACE_COLUMNS)} columns", line_no)
        try:
            trace.records.append(EpochRecord(
                int(fields[0]), float(fields[1]), _parse_value(fields[2]), _parse_value(fields[3]), fields[4] == "1",
            ))
        except ValueError as e:
            raise DatasetError(path, str(e), line_no) from e
    return trace


def compute_loss(density: Tensor, points: Sequence[np.ndarray], cfg: TrainConfig, input_size) -> Tensor:
    if cfg.loss is LossKind.BAYESIAN:
        margin = cfg.bl_margin_ratio * min(input_size) if cfg.bl_background else None
        return bayesian_loss(density, points, cfg.bl_sigma, margin, DENSITY_STRIDE)
    return mse_loss(density, points, cfg.gaussian_sigma, DENSITY_STRIDE)


def epoch_order(seed: int, epoch: int, size: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(size)


def train_epoch(
    model: ModelParams,
    split: PreparedSplit,
    cfg: TrainConfig,
    state: AdamState,
    epoch: int,
    progress: bool = True,
) -> float:
    """One pass over shuffled mini-batches; returns the mean batch loss"""
    order = epoch_order(cfg.seed, epoch, len(split))
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    input_size = split.rgb.shape[2:]
    losses = []
    for batch_index, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=None if progress else True)):
        model.zero_grad()
        try:
            with GradTape() as tape:
                density = forward(Tensor(split.rgb[batch]), Tensor(split.thermal[batch]), model, cfg.variant)
                loss = compute_loss(density, [split.points[i] for i in batch], cfg, input_size)
        except NumericalError as e:
            raise NumericalError(f"epoch {epoch}, batch {batch_index}: {e}") from e
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        tape.backward(loss)
        adam_step(model, state, cfg, epoch)
        losses.append(value)
    return float(np.mean(losses))


def train(
    model: ModelParams,
    train_split: PreparedSplit,
    val_split: PreparedSplit,
    cfg: TrainConfig,
    out_dir=None,
    progress: bool = True,
) -> TrainResult:
    """Optimize `model` in place; the result carries a copy of the best model.

    With `out_dir`, the best checkpoint is rewritten on every new best and the
    trace is written at the end.
    """
    cfg.validate()
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValidationError("training needs non-empty train and val splits")
    if cfg.variant is not model.config.variant:
        logger.warning("Training a %s model as %s", model.config.variant.value, cfg.variant.value)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    trace = TrainTrace()
    state = AdamState()
    best_model = model.copy()
    best_game0 = math.inf
    if out_dir is not None:
        save_checkpoint(best_model, out_dir / CHECKPOINT_NAME)

    epochs = tqdm(range(1, cfg.max_epochs + 1), desc="training", disable=None if progress else True)
    for epoch in epochs:
        record = EpochRecord(epoch, train_epoch(model, train_split, cfg, state, epoch, progress))
        if epoch >= cfg.val_start_epoch:
            report = evaluate(model, val_split, cfg.variant, workers=cfg.eval_workers)
            record.val_game0, record.val_rmse = report.overall.game[0], report.overall.rmse
            if record.val_game0 < best_game0:
                best_game0 = record.val_game0
                best_model = model.copy()
                record.best = True
                logger.info("Epoch %d: new best validation GAME(0) %.4f", epoch, best_game0)
                if out_dir is not None:
                    save_checkpoint(best_model, out_dir / CHECKPOINT_NAME)
        trace.records.append(record)
        epochs.set_postfix(loss=f"{record.train_loss:.4f}", best=f"{best_game0:.3f}")
        logger.debug("Epoch %d: train loss %.6f", epoch, record.train_loss)

    if out_dir is not None:
        write_trace(trace, out_dir / TRACE_NAME)
    return TrainResult(best_model, trace)


def predict_density(
    model: ModelParams,
    rgb: np.ndarray,
    thermal: np.ndarray,
    variant: Optional[Variant] = None,
    drop_modality: Optional[str] = None,
) -> np.ndarray:
    """Density maps (n, h, w) for already-normalized (n, 3, H, W) / (n, 1, H, W) arrays"""
    density = forward(Tensor(rgb), Tensor(thermal), model, variant, drop_modality=drop_modality)
    return density.data[:, 0]


def predict_pair(model: ModelParams, rgb: np.ndarray, thermal: np.ndarray, stats: NormalizationStats, **kwargs) -> np.ndarray:
    """Density map (h, w) for one raw [0, 1] image pair"""
    rgb, thermal = normalize_images(rgb, thermal, stats)
    return predict_density(model, rgb[None], thermal[None], **kwargs)[0]


def evaluate(
    model: ModelParams,
    split: PreparedSplit,
    variant: Optional[Variant] = None,
    drop_modality: Optional[str] = None,
    workers: int = 1,
) -> EvalReport:
    """GAME(0..3) and RMSE for all, bright and dark images; row order follows the split"""
    if len(split) == 0:
        raise ValidationError("cannot evaluate an empty split")

    def score(index):
        density = predict_density(model, split.rgb[index:index + 1], split.thermal[index:index + 1], variant, drop_modality)
        return score_image(split.ids[index], split.illuminations[index], density[0], split.points[index], DENSITY_STRIDE)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(score, range(len(split))))
    else:
        results = [score(i) for i in range(len(split))]
    return build_report(results)


def mean_count_game0(train_split: PreparedSplit, test_split: PreparedSplit) -> float:
    """GAME(0) of always predicting the mean training count"""
    mean_count = float(train_split.counts.mean())
    return mae(np.full(len(test_split), mean_count), test_split.counts)


@dataclass
class AblationRow:
    variant: Variant
    report: EvalReport
    improvement: Dict[str, Optional[float]]


def ablate(
    config: ExperimentConfig,
    train_split: PreparedSplit,
    val_split: PreparedSplit,
    test_split: PreparedSplit,
    out_dir=None,
    progress: bool = True,
) -> List[AblationRow]:
    """Train baseline, iim_no_attn and full from the same seed and score each on test"""
    rows = []
    for variant in Variant:
        variant_config = config.with_variant(variant)
        logger.info("Ablation: training %s", variant.value)
        model = build_tafnet(variant_config.model, variant_config.train.seed)
        variant_dir = Path(out_dir) / variant.value if out_dir is not None else None
        result = train(model, train_split, val_split, variant_config.train, variant_dir, progress)
        report = evaluate(result.model, test_split, variant, workers=variant_config.train.eval_workers)
        rows.append(AblationRow(variant, report, {}))
    for row in rows:
        row.improvement = compare_reports(rows[0].report, row.report)
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    header = ["variant", "game0", "game1", "game2", "game3", "rmse"]
    header += [f"{key}_impr%" for key in ("game0", "game1", "game2", "game3", "rmse")]
    lines = ["\t".join(header)]
    for row in rows:
        metrics = row.report.overall.as_dict()
        values = [f"{metrics[k]:.6f}" for k in ("game0", "game1", "game2", "game3", "rmse")]
        values += [
            "-" if row.improvement.get(k) is None else f"{row.improvement[k]:.2f}"
            for k in ("game0", "game1", "game2", "game3", "rmse")
        ]
        lines.append("\t".join([row.variant.value, *values]))
    return "\n".join(lines) + "\n"


def save_training_outputs(out_dir, stats: NormalizationStats):
    """Copy the normalization constants next to the checkpoint"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return save_normalization(stats, out_dir / NORMALIZATION)
