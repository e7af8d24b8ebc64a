"""Synthetic paired RGB-T crowd scenes.

Bright scenes show people clearly in RGB and faintly in thermal; dark scenes
flip that. Thermal blobs are jittered to model imperfect registration, while
annotations stay in the RGB frame.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.config import SynthConfig

logger = logging.getLogger(__name__)

BRIGHT = "bright"
DARK = "dark"
ILLUMINATIONS = (BRIGHT, DARK)
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

# scene background levels per illumination
RGB_BACKGROUND = {BRIGHT: 0.3, DARK: 0.08}
THERMAL_BACKGROUND = {BRIGHT: 0.45, DARK: 0.25}


@dataclass
class ScenePair:
    id: str
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    thermal: np.ndarray  # (1, H, W) in [0, 1]
    points: np.ndarray  # (k, 2) head positions (x, y), RGB frame
    illumination: str
    thermal_points: Optional[np.ndarray] = None  # only known for generated scenes

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def size(self) -> Tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


def _blob_mask(centers: np.ndarray, radii: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Radial falloff disks (1 at the center, 0 at the radius), overlaps take the max"""
    h, w = size
    mask = np.zeros((h, w))
    if len(centers) == 0:
        return mask
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    for (x, y), r in zip(centers, radii):
        falloff = 1.0 - np.hypot(xs - x, ys - y) / r
        np.maximum(mask, falloff, out=mask)
    return mask


def generate_scene(rng: np.random.Generator, cfg: SynthConfig, scene_id: str = "scene") -> ScenePair:
    h, w = cfg.image_size
    illumination = BRIGHT if rng.random() < cfg.bright_fraction else DARK
    count = int(rng.integers(cfg.count_min, cfg.count_max + 1))

    points = np.column_stack([rng.uniform(0, w, count), rng.uniform(0, h, count)])
    # uniform() may round up to its upper bound
    points = np.minimum(points, np.nextafter([w, h], 0))
    radii = rng.uniform(cfg.radius_min, cfg.radius_max, count)
    jitter = rng.uniform(-cfg.misalignment_max, cfg.misalignment_max, (count, 2))
    thermal_points = points + jitter

    if illumination == BRIGHT:
        rgb_contrast, thermal_contrast = cfg.rgb_contrast_bright, cfg.thermal_contrast_bright
    else:
        rgb_contrast, thermal_contrast = cfg.rgb_contrast_dark, cfg.thermal_contrast_dark

    # slight per-channel tint of the background
    tint = rng.uniform(-0.05, 0.05, 3)
    rgb_mask = _blob_mask(points, radii, (h, w))
    rgb = (RGB_BACKGROUND[illumination] + tint)[:, None, None] + rgb_contrast * rgb_mask[None]
    thermal = THERMAL_BACKGROUND[illumination] + thermal_contrast * _blob_mask(thermal_points, radii, (h, w))[None]

    rgb = np.clip(rgb + rng.normal(0.0, cfg.noise_std, rgb.shape), 0.0, 1.0)
    thermal = np.clip(thermal + rng.normal(0.0, cfg.noise_std, thermal.shape), 0.0, 1.0)
    return ScenePair(scene_id, rgb, thermal, points.reshape(-1, 2), illumination, thermal_points.reshape(-1, 2))


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per (seed, split, index)"""
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_CODES[split], index]))


def scene_id(split: str, index: int) -> str:
    return f"{split}_{index:04d}"


def generate_split(cfg: SynthConfig, split: str, size: int, workers: int = 1) -> List[ScenePair]:
    """Scenes of one split in id order; identical for any worker count"""
    def generate_one(index):
        return index, generate_scene(scene_rng(cfg.seed, split, index), cfg, scene_id(split, index))

    if workers <= 1:
        return [generate_one(i)[1] for i in range(size)]

    scenes: Dict[int, ScenePair] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(generate_one, i) for i in range(size)]
        for future in as_completed(futures):
            index, scene = future.result()
            scenes[index] = scene
    return [scenes[i] for i in range(size)]


def generate_dataset(cfg: SynthConfig, workers: int = 1) -> Dict[str, List[ScenePair]]:
    cfg.validate()
    dataset = {split: generate_split(cfg, split, size, workers) for split, size in cfg.split_sizes().items()}
    logger.info("Generated %s scenes", ", ".join(f"{len(v)} {k}" for k, v in dataset.items()))
    return dataset


def scene_contrast(pair: ScenePair, inner_radius: float = 1.0, outer_radius: float = 8.0) -> Tuple[float, float]:
    """(RGB, thermal) mean foreground minus mean background intensity.

    Foreground pixels lie within `inner_radius` of a blob center, background
    pixels farther than `outer_radius` from every center of that modality.
    NaN when either region is empty.
    """
    h, w = pair.size
    ys, xs = np.mgrid[0:h, 0:w] + 0.5

    def contrast(image, centers):
        if len(centers) == 0:
            return float("nan")
        nearest = np.min(np.hypot(xs[None] - centers[:, 0, None, None], ys[None] - centers[:, 1, None, None]), axis=0)
        foreground, background = nearest <= inner_radius, nearest > outer_radius
        if not foreground.any() or not background.any():
            return float("nan")
        intensity = image.mean(axis=0)
        return float(intensity[foreground].mean() - intensity[background].mean())

    thermal_centers = pair.thermal_points if pair.thermal_points is not None else pair.points
    return contrast(pair.rgb, pair.points), contrast(pair.thermal, thermal_centers)
