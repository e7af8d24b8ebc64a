"""Counting metrics: GAME(l), MAE, RMSE and the illumination-split report"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ValidationError

GAME_LEVELS = (0, 1, 2, 3)
SPLITS = ("all", "bright", "dark")


def _check_level(level: int):
    if level not in GAME_LEVELS:
        raise ValidationError(f"GAME level must be in 0..3, got {level}")


def grid_edges(size: int, parts: int) -> np.ndarray:
    return np.array([(i * size) // parts for i in range(parts + 1)])


def game_image_error(density: np.ndarray, points, level: int, stride: int = 8) -> float:
    """Sum over the 2^l x 2^l grid of |predicted cell mass - annotated heads in cell|.

    `points` are (x, y) input pixels and are divided by `stride` onto the
    map grid; a point on a cell boundary belongs to the higher-index cell.
    """
    _check_level(level)
    density = np.asarray(density, dtype=np.float64)
    if density.ndim != 2:
        raise ValidationError(f"density map must be 2-D, got shape {density.shape}")
    h, w = density.shape
    parts = 2 ** level
    rows, cols = grid_edges(h, parts), grid_edges(w, parts)

    predicted = np.array(
        [[density[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].sum() for j in range(parts)] for i in range(parts)]
    )
    annotated = np.zeros((parts, parts))
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2) / stride
    if len(points):
        col_index = np.searchsorted(cols[1:-1], points[:, 0], side="right")
        row_index = np.searchsorted(rows[1:-1], points[:, 1], side="right")
        np.add.at(annotated, (row_index, col_index), 1.0)
    return float(np.abs(predicted - annotated).sum())


def game(pred_maps: Sequence[np.ndarray], gt_points: Sequence, level: int, stride: int = 8) -> float:
    """Grid Average Mean absolute Error over a set of images"""
    _check_level(level)
    if len(pred_maps) != len(gt_points):
        raise ValidationError(f"{len(pred_maps)} maps for {len(gt_points)} annotation sets")
    if not pred_maps:
        raise ValidationError("GAME needs at least one image")
    return float(np.mean([game_image_error(m, p, level, stride) for m, p in zip(pred_maps, gt_points)]))


def _paired(preds, gts) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ValidationError(f"{preds.size} predictions for {gts.size} ground truths")
    if preds.size == 0:
        raise ValidationError("metrics need at least one image")
    return preds, gts


def mae(preds, gts) -> float:
    preds, gts = _paired(preds, gts)
    return float(np.mean(np.abs(preds - gts)))


def rmse(preds, gts) -> float:
    preds, gts = _paired(preds, gts)
    return float(np.sqrt(np.mean((preds - gts) ** 2)))


@dataclass(frozen=True)
class ImageResult:
    id: str
    illumination: str
    gt_count: int
    pred_count: float
    game_errors: Tuple[float, ...]


def score_image(image_id: str, illumination: str, density: np.ndarray, points, stride: int = 8) -> ImageResult:
    density = np.asarray(density, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return ImageResult(
        id=image_id,
        illumination=illumination,
        gt_count=len(points),
        pred_count=float(density.sum()),
        game_errors=tuple(game_image_error(density, points, level, stride) for level in GAME_LEVELS),
    )


@dataclass(frozen=True)
class SplitMetrics:
    images: int
    game: Tuple[float, ...]
    rmse: float

    @property
    def mae(self) -> float:
        return self.game[0]

    def as_dict(self) -> Dict[str, float]:
        values = {f"game{level}": value for level, value in zip(GAME_LEVELS, self.game)}
        values["rmse"] = self.rmse
        return values


@dataclass
class EvalReport:
    images: List[ImageResult]
    splits: Dict[str, Optional[SplitMetrics]] = field(default_factory=dict)

    @property
    def overall(self) -> SplitMetrics:
        return self.splits["all"]


def split_metrics(results: Sequence[ImageResult]) -> Optional[SplitMetrics]:
    """Aggregates for a subset; None when the subset is empty"""
    if not results:
        return None
    errors = np.array([r.game_errors for r in results])
    return SplitMetrics(
        images=len(results),
        game=tuple(float(v) for v in errors.mean(axis=0)),
        rmse=rmse([r.pred_count for r in results], [r.gt_count for r in results]),
    )


def build_report(results: Sequence[ImageResult]) -> EvalReport:
    if not results:
        raise ValidationError("cannot report on an empty split")
    results = list(results)
    return EvalReport(
        images=results,
        splits={
            "all": split_metrics(results),
            "bright": split_metrics([r for r in results if r.illumination == "bright"]),
            "dark": split_metrics([r for r in results if r.illumination == "dark"]),
        },
    )


def format_report(report: EvalReport) -> str:
    """Tab-separated per-image rows followed by the aggregate block"""
    lines = ["# images", "id\tillumination\tgt\tpred"]
    for r in report.images:
        lines.append(f"{r.id}\t{r.illumination}\t{r.gt_count}\t{r.pred_count:.6f}")
    lines += ["# aggregate", "split\timages\tgame0\tgame1\tgame2\tgame3\trmse"]
    for name in SPLITS:
        metrics = report.splits.get(name)
        if metrics is None:
            lines.append(f"{name}\tabsent")
            continue
        values = "\t".join(f"{v:.6f}" for v in (*metrics.game, metrics.rmse))
        lines.append(f"{name}\t{metrics.images}\t{values}")
    return "\n".join(lines) + "\n"


def relative_improvement(reference: float, candidate: float) -> float:
    """Percent reduction of an error metric relative to `reference`"""
    if reference == 0:
        return 0.0 if candidate == 0 else -math.inf
    return 100.0 * (reference - candidate) / reference


def compare_reports(reference: EvalReport, candidate: EvalReport, split: str = "all") -> Dict[str, Optional[float]]:
    ref, cand = reference.splits.get(split), candidate.splits.get(split)
    if ref is None or cand is None:
        return {key: None for key in ("game0", "game1", "game2", "game3", "rmse")}
    ref_values, cand_values = ref.as_dict(), cand.as_dict()
    return {key: relative_improvement(ref_values[key], cand_values[key]) for key in ref_values}
