"""Dataset directory persistence.

Layout:
    <root>/normalization.txt            per-channel mean/std of the train split
    <root>/<split>/annotations.jsonl    {"id", "illumination", "points": [[x, y], ...]}
    <root>/<split>/<id>.rgb.ppm         binary 8-bit PPM
    <root>/<split>/<id>.thermal.pgm     binary 8-bit PGM
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

from utils.data_synth import ILLUMINATIONS, ScenePair
from utils.errors import DatasetError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ANNOTATIONS = "annotations.jsonl"
NORMALIZATION = "normalization.txt"
CHANNELS = ("r", "g", "b", "thermal")
RGB_SUFFIX = ".rgb.ppm"
THERMAL_SUFFIX = ".thermal.pgm"


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit levels"""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(levels: np.ndarray) -> np.ndarray:
    return levels.astype(np.float64) / 255.0


def display_levels(image: np.ndarray) -> np.ndarray:
    """(3, H, W) or (1, H, W) floats as an (H, W, 3) or (H, W) 8-bit image"""
    levels = quantize(image)
    return np.ascontiguousarray(levels.transpose(1, 2, 0)) if levels.shape[0] == 3 else levels[0]


def density_preview(density: np.ndarray) -> np.ndarray:
    """8-bit view of a density map scaled to its peak"""
    peak = density.max()
    return quantize(density / peak if peak > 0 else density)


def rgb_path(split_dir: Path, image_id: str) -> Path:
    return split_dir / f"{image_id}{RGB_SUFFIX}"


def thermal_path(split_dir: Path, image_id: str) -> Path:
    return split_dir / f"{image_id}{THERMAL_SUFFIX}"


def write_image(path: Path, image: np.ndarray):
    """Write a (3, H, W) image as PPM or a (1, H, W) image as PGM"""
    Image.fromarray(display_levels(image)).save(path, format="PPM")


def read_image(path: Path, channels: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(path, "image file not found")
    return decode_image(path, channels, path)


def decode_image(source, channels: int, path) -> np.ndarray:
    """(channels, H, W) floats from a path or binary stream holding a PPM/PGM;
    `path` names the source in errors"""
    try:
        with Image.open(source) as image:
            image.load()
            mode = image.mode
            levels = np.asarray(image)
    except OSError as e:
        raise DatasetError(path, f"unreadable image ({e})") from e
    expected = "RGB" if channels == 3 else "L"
    if mode != expected:
        raise DatasetError(path, f"expected a {expected} image, got mode {mode}")
    if channels == 3:
        return dequantize(levels.transpose(2, 0, 1))
    return dequantize(levels[None])


def _clear_split(split_dir: Path):
    """Remove the files of a previously written split; refuse a directory holding anything else"""
    stale, foreign = [], []
    for path in sorted(split_dir.iterdir()):
        owned = path.is_file() and (path.name == ANNOTATIONS or path.name.endswith((RGB_SUFFIX, THERMAL_SUFFIX)))
        (stale if owned else foreign).append(path)
    if foreign:
        raise DatasetError(foreign[0], "not part of a dataset split; refusing to write the split here")
    for path in stale:
        path.unlink()
    if stale:
        logger.info("Removed %d files of a previous split in %s", len(stale), split_dir)


def write_split(pairs: Iterable[ScenePair], split_dir) -> int:
    """Write one split, replacing whatever split was stored there before"""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    _clear_split(split_dir)
    written = 0
    with open(split_dir / ANNOTATIONS, "w", encoding="utf-8") as annotations:
        for pair in pairs:
            write_image(rgb_path(split_dir, pair.id), pair.rgb)
            write_image(thermal_path(split_dir, pair.id), pair.thermal)
            record = {
                "id": pair.id,
                "illumination": pair.illumination,
                "points": [[float(x), float(y)] for x, y in pair.points],
            }
            annotations.write(json.dumps(record) + "\n")
            written += 1
    return written


def write_dataset(dataset: Dict[str, List[ScenePair]], root) -> Path:
    root = Path(root)
    for split, pairs in dataset.items():
        count = write_split(pairs, root / split)
        logger.info("Wrote %d %s scenes to %s", count, split, root / split)
    return root


def _is_coordinate(value) -> bool:
    # json booleans are ints to isinstance
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_record(line: str, path: Path, line_no: int) -> Dict[str, Any]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(path, f"malformed record ({e.msg})", line_no) from e
    if not isinstance(record, dict) or set(record) != {"id", "illumination", "points"}:
        raise DatasetError(path, "record needs exactly the fields id, illumination, points", line_no)
    if not isinstance(record["id"], str) or not record["id"]:
        raise DatasetError(path, "id must be a non-empty string", line_no)
    if record["illumination"] not in ILLUMINATIONS:
        raise DatasetError(path, f"{record['id']}: illumination must be one of {ILLUMINATIONS}", line_no)
    raw = record["points"]
    pairs_ok = isinstance(raw, list) and all(
        isinstance(p, list) and len(p) == 2 and all(map(_is_coordinate, p)) for p in raw
    )
    if not pairs_ok:
        raise DatasetError(path, f"{record['id']}: points must be [x, y] pairs", line_no)
    record["points"] = np.array(raw, dtype=np.float64).reshape(-1, 2)
    return record


def read_split(split_dir) -> List[ScenePair]:
    """Load one split, validating files against the annotation records"""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DatasetError(split_dir, "split directory not found")
    annotation_file = split_dir / ANNOTATIONS
    if not annotation_file.is_file():
        raise DatasetError(annotation_file, "annotation file not found")

    pairs = []
    seen = set()
    with open(annotation_file, encoding="utf-8") as annotations:
        for line_no, line in enumerate(annotations, start=1):
            if not line.strip():
                continue
            record = _parse_record(line, annotation_file, line_no)
            image_id = record["id"]
            if image_id in seen:
                raise DatasetError(annotation_file, f"duplicate id {image_id}", line_no)
            seen.add(image_id)

            rgb = read_image(rgb_path(split_dir, image_id), 3)
            thermal = read_image(thermal_path(split_dir, image_id), 1)
            if rgb.shape[1:] != thermal.shape[1:]:
                raise DatasetError(annotation_file, f"{image_id}: RGB {rgb.shape[1:]} and thermal {thermal.shape[1:]} sizes differ", line_no)
            h, w = rgb.shape[1:]
            if h % 32 or w % 32:
                raise DatasetError(annotation_file, f"{image_id}: image size {h}x{w} is not divisible by 32", line_no)
            points = record["points"]
            inside = (points[:, 0] >= 0) & (points[:, 0] < w) & (points[:, 1] >= 0) & (points[:, 1] < h)
            if not inside.all():
                raise DatasetError(annotation_file, f"{image_id}: point out of bounds for a {w}x{h} image", line_no)
            pairs.append(ScenePair(image_id, rgb, thermal, points, record["illumination"]))

    expected = {rgb_path(split_dir, i).name for i in seen} | {thermal_path(split_dir, i).name for i in seen}
    extra = sorted(p.name for p in split_dir.iterdir() if p.name != ANNOTATIONS and p.name not in expected)
    if extra:
        raise DatasetError(split_dir / extra[0], "file has no annotation record")
    return pairs


def read_dataset(root, splits: Iterable[str] = SPLITS) -> Dict[str, List[ScenePair]]:
    root = Path(root)
    dataset = {split: read_split(root / split) for split in splits}
    logger.info("Read %s from %s", ", ".join(f"{len(v)} {k}" for k, v in dataset.items()), root)
    return dataset


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel (r, g, b, thermal) mean and std"""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.mean), np.array(self.std)


def compute_normalization(pairs: List[ScenePair]) -> NormalizationStats:
    """Constants from 8-bit quantized images, so they match what is read back"""
    if not pairs:
        raise ValidationError("normalization needs at least one training image")
    rgb = np.stack([dequantize(quantize(p.rgb)) for p in pairs])
    thermal = np.stack([dequantize(quantize(p.thermal)) for p in pairs])
    values = np.concatenate([rgb, thermal], axis=1)
    mean = values.mean(axis=(0, 2, 3))
    std = values.std(axis=(0, 2, 3))
    if np.any(std == 0):
        raise ValidationError("training images have a constant channel; cannot standardize")
    return NormalizationStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def save_normalization(stats: NormalizationStats, path) -> Path:
    path = Path(path)
    lines = ["# channel mean std"]
    lines += [f"{name} {m!r} {s!r}" for name, m, s in zip(CHANNELS, stats.mean, stats.std)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_normalization(path) -> NormalizationStats:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(path, "normalization constants not found")
    values = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in CHANNELS:
            raise DatasetError(path, "expected '<channel> <mean> <std>'", line_no)
        try:
            mean, std = float(parts[1]), float(parts[2])
        except ValueError as e:
            raise DatasetError(path, str(e), line_no) from e
        if not std > 0:
            raise DatasetError(path, f"std of {parts[0]} must be > 0", line_no)
        values[parts[0]] = (mean, std)
    missing = [c for c in CHANNELS if c not in values]
    if missing:
        raise DatasetError(path, f"missing channels {missing}")
    return NormalizationStats(tuple(values[c][0] for c in CHANNELS), tuple(values[c][1] for c in CHANNELS))


def normalize_images(rgb: np.ndarray, thermal: np.ndarray, stats: NormalizationStats) -> Tuple[np.ndarray, np.ndarray]:
    mean, std = stats.arrays()
    return (rgb - mean[:3, None, None]) / std[:3, None, None], (thermal - mean[3]) / std[3]


def normalize(pair: ScenePair, stats: NormalizationStats) -> Tuple[np.ndarray, np.ndarray]:
    """Standardized (3, H, W) RGB and (1, H, W) thermal arrays"""
    return normalize_images(pair.rgb, pair.thermal, stats)


def denormalize(rgb: np.ndarray, thermal: np.ndarray, stats: NormalizationStats) -> Tuple[np.ndarray, np.ndarray]:
    mean, std = stats.arrays()
    return rgb * std[:3, None, None] + mean[:3, None, None], thermal * std[3] + mean[3]


class DatasetManager:
    """Lazy, cached access to a dataset directory"""

    def __init__(self, root):
        self.root = Path(root)
        self._splits: Dict[str, List[ScenePair]] = {}

    def available_splits(self) -> List[str]:
        return [s for s in SPLITS if (self.root / s / ANNOTATIONS).is_file()]

    def get_split(self, split: str) -> List[ScenePair]:
        if split not in self._splits:
            self._splits[split] = read_split(self.root / split)
        return self._splits[split]

    def get_scene_by_id(self, split: str, image_id: str) -> Optional[ScenePair]:
        for pair in self.get_split(split):
            if pair.id == image_id:
                return pair
        return None

    def get_normalization(self) -> NormalizationStats:
        return load_normalization(self.root / NORMALIZATION)

    def get_statistics(self) -> Dict[str, Dict[str, Any]]:
        """Per split: image count, bright/dark counts, total and mean annotated count"""
        stats = {}
        for split in self.available_splits():
            pairs = self.get_split(split)
            counts = [p.count for p in pairs]
            stats[split] = {
                "images": len(pairs),
                "bright": sum(1 for p in pairs if p.illumination == "bright"),
                "dark": sum(1 for p in pairs if p.illumination == "dark"),
                "total_count": int(sum(counts)),
                "mean_count": float(np.mean(counts)) if counts else 0.0,
            }
        return stats
