"""Point-supervised training objectives.

Point annotations are (k, 2) arrays of (x, y) in input pixels. Density cell
(i, j) covers a stride x stride block and is centered at
((j + 0.5) * stride, (i + 0.5) * stride).
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ShapeError, ValidationError
from utils.tensor_core import Tensor, note_branches, record_op


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def cell_centers(shape: Tuple[int, int], stride: int) -> np.ndarray:
    """(h*w, 2) cell centers in input pixels, row-major"""
    h, w = shape
    ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def bayesian_posteriors(
    points,
    shape: Tuple[int, int],
    sigma: float,
    background_margin: Optional[float] = None,
    stride: int = 8,
) -> np.ndarray:
    """Posterior p(class | cell) as a (k [+1], h*w) matrix.

    Rows are the annotations, plus a trailing background row when
    `background_margin` is given. A cell's background likelihood uses the
    distance |min_n d_n - margin|, so cells about `margin` away from every
    head are claimed by the background.
    """
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    points = _as_points(points)
    centers = cell_centers(shape, stride)
    sq_dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = -sq_dist / (2.0 * sigma ** 2)
    if background_margin is not None and len(points):
        nearest = np.sqrt(sq_dist.min(axis=0))
        logits = np.vstack([logits, -((nearest - background_margin) ** 2) / (2.0 * sigma ** 2)])
    logits = logits - logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=0, keepdims=True)


def bayesian_loss(
    density: Tensor,
    points: Sequence,
    sigma: float,
    background_margin: Optional[float] = None,
    stride: int = 8,
) -> Tensor:
    """Mean over the batch of sum_n |1 - E[c_n]| (+ |E[c_bg]|).

    An image without annotations contributes the sum of its map.
    """
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    if density.data.ndim != 4 or density.shape[1] != 1:
        raise ShapeError(f"density map must be (n, 1, h, w), got {density.shape}")
    n, _, h, w = density.shape
    if len(points) != n:
        raise ShapeError(f"{len(points)} annotation sets for a batch of {n}")

    total = 0.0
    signs: List[Tuple[Optional[np.ndarray], np.ndarray]] = []
    for item in range(n):
        flat = density.data[item, 0].reshape(-1)
        item_points = _as_points(points[item])
        if len(item_points) == 0:
            # every cell counts as background
            total += flat.sum()
            signs.append((None, np.ones_like(flat)))
            continue
        posterior = bayesian_posteriors(item_points, (h, w), sigma, background_margin, stride)
        target = np.ones(posterior.shape[0])
        if background_margin is not None:
            target[-1] = 0.0
        diff = posterior @ flat - target
        total += np.abs(diff).sum()
        signs.append((posterior, np.sign(diff)))
        note_branches(signs[-1][1])

    def backward(g):
        grad = np.zeros_like(density.data)
        for item, (posterior, sign) in enumerate(signs):
            direction = sign if posterior is None else posterior.T @ sign
            grad[item, 0] = direction.reshape(h, w)
        return (grad * (g / n),)

    return record_op(np.array(total / n), (density,), backward)


def gaussian_density_gt(points, shape: Tuple[int, int], sigma: float, stride: int = 1) -> np.ndarray:
    """Sum of per-point discrete Gaussians, each renormalized to sum to 1.

    A point whose kernel underflows everywhere lands on its nearest cell.
    """
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    h, w = shape
    density = np.zeros(h * w)
    centers = cell_centers(shape, stride)
    for point in _as_points(points):
        sq_dist = ((centers - point) ** 2).sum(axis=1)
        kernel = np.exp(-sq_dist / (2.0 * sigma ** 2))
        total = kernel.sum()
        if total > 0:
            density += kernel / total
        else:
            density[np.argmin(sq_dist)] += 1.0
    return density.reshape(h, w)


def mse_loss(density: Tensor, points: Sequence, sigma: float, stride: int = 8) -> Tensor:
    """Mean over the batch of the summed squared error against Gaussian ground truth"""
    if density.data.ndim != 4 or density.shape[1] != 1:
        raise ShapeError(f"density map must be (n, 1, h, w), got {density.shape}")
    n, _, h, w = density.shape
    if len(points) != n:
        raise ShapeError(f"{len(points)} annotation sets for a batch of {n}")
    target = np.stack([gaussian_density_gt(p, (h, w), sigma, stride) for p in points])[:, None]
    diff = density.data - target
    return record_op(np.array((diff ** 2).sum() / n), (density,), lambda g: (2.0 * diff * (g / n),))
