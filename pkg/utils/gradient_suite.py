"""Finite-difference checks for every differentiable op and block.

Each check builds small random inputs, reduces the output to a scalar
through a fixed random projection and compares tape gradients against
central differences.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from utils.config import TafnetConfig, Variant
from utils.errors import NumericalError
from utils.layers import (
    build_channel_attention,
    build_pyramid_pooling,
    build_spatial_attention,
    build_vgg_stage,
    channel_attention,
    pyramid_pooling,
    spatial_attention,
    vgg_stage_configs,
    vgg_stage_forward,
)
from utils.losses import bayesian_loss, mse_loss
from utils.tafnet import (
    DENSITY_STRIDE,
    build_header,
    build_iim,
    build_tafnet,
    forward,
    iim_forward,
    regression_header,
)
from utils.tensor_core import (
    ModelParams,
    Parameter,
    Tensor,
    adaptive_avgpool2d,
    add,
    bilinear_upsample,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg,
    global_max,
    grad_check,
    linear,
    maxpool2d,
    mul,
    relu,
    scale_channels,
    scale_pixels,
    scale_scalar,
    sigmoid,
    sum_all,
)

logger = logging.getLogger(__name__)

BLOCK_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4
# channels and spatial size of the block-level checks
BLOCK_CHANNELS = 8
BLOCK_SIZE = 8
# bias init of the block checks; the density bias keeps the output relu open
BIAS_SCALE = 0.1
DENSITY_BIAS = 0.5
# a model setup counts as live when this share of density cells is positive
LIVE_FRACTION = 0.5
LIVE_ATTEMPTS = 8


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _param(rng: np.random.Generator, name: str, shape) -> Parameter:
    return Parameter(name, rng.normal(size=shape))


def _projection(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=shape))
    return lambda out: sum_all(mul(out, weights))


def _check(f, params, rng, coords: int = 6) -> float:
    return grad_check(f, params, eps=1e-5, coords_per_param=coords, seed=int(rng.integers(2 ** 31)))


def _jitter_biases(model: ModelParams, rng: np.random.Generator):
    """Replace the zero bias init so no relu input sits exactly on its kink"""
    for param in model:
        if param.name.endswith(".bias"):
            param.data = rng.normal(0.0, BIAS_SCALE, size=param.shape)
    if "head.conv3.bias" in model:
        model["head.conv3.bias"].data = DENSITY_BIAS + np.abs(rng.normal(0.0, BIAS_SCALE, size=1))


def _draw_live(rng: np.random.Generator, what: str, draw: Callable):
    """Call `draw(rng)` until the density map it returns is mostly positive.

    `draw` returns `(density, *setup)`; the setup of the first live draw is returned.
    """
    for _ in range(LIVE_ATTEMPTS):
        density, *setup = draw(rng)
        if np.mean(density.data > 0) >= LIVE_FRACTION:
            return setup
    raise NumericalError(f"{what}: density map stayed mostly zero over {LIVE_ATTEMPTS} draws")


# --- primitive ops ---

def check_conv2d(rng, cfg):
    x, w, b = _param(rng, "x", (2, 3, 8, 8)), _param(rng, "weight", (4, 3, 3, 3)), _param(rng, "bias", (4,))
    reduce = _projection(rng, (2, 4, 8, 8))
    return _check(lambda: reduce(conv2d(x, w, b, stride=1, pad=1)), [x, w, b], rng)


def check_strided_conv2d(rng, cfg):
    x, w, b = _param(rng, "x", (1, 2, 9, 9)), _param(rng, "weight", (3, 2, 3, 3)), _param(rng, "bias", (3,))
    reduce = _projection(rng, (1, 3, 4, 4))
    return _check(lambda: reduce(conv2d(x, w, b, stride=2, pad=0)), [x, w, b], rng)


def check_maxpool2d(rng, cfg):
    x = _param(rng, "x", (2, 4, 8, 8))
    reduce = _projection(rng, (2, 4, 4, 4))
    return _check(lambda: reduce(maxpool2d(x)), [x], rng)


def check_adaptive_avgpool2d(rng, cfg):
    x = _param(rng, "x", (2, 4, 8, 8))
    reduce = _projection(rng, (2, 4, 3, 3))
    return _check(lambda: reduce(adaptive_avgpool2d(x, 3, 3)), [x], rng)


def check_bilinear_upsample(rng, cfg):
    x = _param(rng, "x", (2, 4, 3, 3))
    reduce = _projection(rng, (2, 4, 8, 7))
    return _check(lambda: reduce(bilinear_upsample(x, 8, 7)), [x], rng)


def check_pointwise(rng, cfg):
    """relu, sigmoid, scaling, concat and the channel/global reductions chained"""
    x = _param(rng, "x", (2, 4, 6, 6))
    s = _param(rng, "channel_scale", (4,))
    g = _param(rng, "gate", (1,))
    reduce = _projection(rng, (2, 5, 6, 6))

    def f():
        y = scale_pixels(scale_channels(relu(x), s), sigmoid(channel_mean(x)))
        y = scale_scalar(concat_channels(y, channel_max(x)), g)
        return add(add(reduce(y), sum_all(global_avg(x))), sum_all(global_max(y)))

    return _check(f, [x, s, g], rng)


def check_linear(rng, cfg):
    x, w, b = _param(rng, "x", (3, 5)), _param(rng, "weight", (2, 5)), _param(rng, "bias", (2,))
    reduce = _projection(rng, (3, 2))
    return _check(lambda: reduce(linear(x, w, b)), [x, w, b], rng)


# --- blocks ---

def check_vgg_stage(rng, cfg):
    stage = vgg_stage_configs(3, cfg.width_multiplier)[0]
    model = ModelParams(cfg)
    seed = int(rng.integers(2 ** 31))
    build_vgg_stage(model.scope("stage"), stage, seed)
    _jitter_biases(model, rng)
    x = _param(rng, "x", (1, 3, BLOCK_SIZE, BLOCK_SIZE))
    reduce = _projection(rng, (1, stage.out_channels, BLOCK_SIZE // 2, BLOCK_SIZE // 2))
    return _check(lambda: reduce(vgg_stage_forward(x, stage, model.scope("stage"))), [x, *model], rng)


def check_channel_attention(rng, cfg):
    model = ModelParams(cfg)
    build_channel_attention(model.scope("channel"), BLOCK_CHANNELS, cfg.attention, int(rng.integers(2 ** 31)))
    _jitter_biases(model, rng)
    x = _param(rng, "x", (2, BLOCK_CHANNELS, BLOCK_SIZE, BLOCK_SIZE))
    reduce = _projection(rng, x.shape)
    return _check(lambda: reduce(channel_attention(x, model.scope("channel"), cfg.attention)), [x, *model], rng)


def check_spatial_attention(rng, cfg):
    model = ModelParams(cfg)
    build_spatial_attention(model.scope("spatial"), cfg.attention, int(rng.integers(2 ** 31)))
    _jitter_biases(model, rng)
    x = _param(rng, "x", (2, BLOCK_CHANNELS, BLOCK_SIZE, BLOCK_SIZE))
    reduce = _projection(rng, x.shape)
    return _check(lambda: reduce(spatial_attention(x, model.scope("spatial"), cfg.attention)), [x, *model], rng)


def check_attention_chain(rng, cfg):
    model = ModelParams(cfg)
    seed = int(rng.integers(2 ** 31))
    build_channel_attention(model.scope("channel"), BLOCK_CHANNELS, cfg.attention, seed)
    build_spatial_attention(model.scope("spatial"), cfg.attention, seed)
    _jitter_biases(model, rng)
    x = _param(rng, "x", (1, BLOCK_CHANNELS, BLOCK_SIZE, BLOCK_SIZE))
    reduce = _projection(rng, x.shape)

    def f():
        refined = channel_attention(x, model.scope("channel"), cfg.attention)
        return reduce(spatial_attention(refined, model.scope("spatial"), cfg.attention))

    return _check(f, [x, *model], rng)


def check_pyramid_pooling(rng, cfg):
    model = ModelParams(cfg)
    build_pyramid_pooling(model.scope("pyramid"), BLOCK_CHANNELS, cfg.pyramid, int(rng.integers(2 ** 31)))
    _jitter_biases(model, rng)
    x = _param(rng, "x", (1, BLOCK_CHANNELS, BLOCK_SIZE, BLOCK_SIZE))
    reduce = _projection(rng, x.shape)
    return _check(lambda: reduce(pyramid_pooling(x, model.scope("pyramid"), cfg.pyramid)), [x, *model], rng)


def check_iim(rng, cfg):
    full = replace(cfg, variant=Variant.FULL)
    model = ModelParams(full)
    build_iim(model.scope("iim"), BLOCK_CHANNELS, full, int(rng.integers(2 ** 31)))
    _jitter_biases(model, rng)
    for gate in ("iim.gate_t", "iim.gate_rgb"):
        model[gate].data = rng.normal(size=1)
    shape = (1, BLOCK_CHANNELS, BLOCK_SIZE, BLOCK_SIZE)
    f_t, f_rgb, f_c = _param(rng, "f_t", shape), _param(rng, "f_rgb", shape), _param(rng, "f_c", shape)
    reduce = _projection(rng, shape)

    def f():
        return reduce(iim_forward(f_t, f_rgb, f_c, model.scope("iim"), full, Variant.FULL))

    return _check(f, [f_t, f_rgb, f_c, *model], rng)


def check_regression_header(rng, cfg):
    channels = vgg_stage_configs(4, cfg.width_multiplier)[-1].out_channels

    def draw(rng):
        model = ModelParams(cfg)
        build_header(model.scope("head"), channels, cfg, int(rng.integers(2 ** 31)))
        _jitter_biases(model, rng)
        x = _param(rng, "f5", (1, channels, 2, 2))
        return regression_header(x, model.scope("head")), model, x

    model, x = _draw_live(rng, "regression_header", draw)
    reduce = _projection(rng, (1, 1, 8, 8))
    return _check(lambda: reduce(regression_header(x, model.scope("head"))), [x, *model], rng)


def _random_points(rng, count: int, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return np.column_stack([rng.uniform(0, w, count), rng.uniform(0, h, count)])


def check_bayesian_loss(rng, cfg):
    density = Parameter("density", rng.uniform(0.0, 0.2, size=(2, 1, 8, 8)))
    points = [_random_points(rng, 3, (64, 64)), _random_points(rng, 1, (64, 64))]
    return _check(lambda: bayesian_loss(density, points, 8.0, 0.15 * 64, DENSITY_STRIDE), [density], rng)


def check_mse_loss(rng, cfg):
    density = Parameter("density", rng.uniform(0.0, 0.2, size=(1, 1, 8, 8)))
    points = [_random_points(rng, 4, (64, 64))]
    return _check(lambda: mse_loss(density, points, 4.0, DENSITY_STRIDE), [density], rng)


def check_end_to_end(rng, cfg):
    """Bayesian loss of the full model over a random tenth of its parameter tensors"""
    full = replace(cfg, variant=Variant.FULL)
    h, w = full.input_size

    def draw(rng):
        model = build_tafnet(full, int(rng.integers(2 ** 31)))
        _jitter_biases(model, rng)
        rgb = Tensor(rng.normal(size=(1, 3, h, w)))
        thermal = Tensor(rng.normal(size=(1, 1, h, w)))
        return forward(rgb, thermal, model, Variant.FULL), model, rgb, thermal

    model, rgb, thermal = _draw_live(rng, "end_to_end", draw)
    points = [_random_points(rng, 5, (h, w))]
    params = list(model)
    chosen = rng.choice(len(params), max(1, len(params) // 10), replace=False)

    def f():
        density = forward(rgb, thermal, model, Variant.FULL)
        return bayesian_loss(density, points, 8.0, 0.15 * min(h, w), DENSITY_STRIDE)

    return _check(f, [params[i] for i in sorted(chosen)], rng, coords=2)


CHECKS: Dict[str, Tuple[Callable, float]] = {
    "conv2d": (check_conv2d, BLOCK_TOLERANCE),
    "conv2d_strided": (check_strided_conv2d, BLOCK_TOLERANCE),
    "maxpool2d": (check_maxpool2d, BLOCK_TOLERANCE),
    "adaptive_avgpool2d": (check_adaptive_avgpool2d, BLOCK_TOLERANCE),
    "bilinear_upsample": (check_bilinear_upsample, BLOCK_TOLERANCE),
    "pointwise": (check_pointwise, BLOCK_TOLERANCE),
    "linear": (check_linear, BLOCK_TOLERANCE),
    "vgg_stage": (check_vgg_stage, BLOCK_TOLERANCE),
    "channel_attention": (check_channel_attention, BLOCK_TOLERANCE),
    "spatial_attention": (check_spatial_attention, BLOCK_TOLERANCE),
    "attention_chain": (check_attention_chain, BLOCK_TOLERANCE),
    "pyramid_pooling": (check_pyramid_pooling, BLOCK_TOLERANCE),
    "iim": (check_iim, BLOCK_TOLERANCE),
    "regression_header": (check_regression_header, BLOCK_TOLERANCE),
    "bayesian_loss": (check_bayesian_loss, BLOCK_TOLERANCE),
    "mse_loss": (check_mse_loss, BLOCK_TOLERANCE),
    "end_to_end": (check_end_to_end, END_TO_END_TOLERANCE),
}


def run_gradient_suite(
    cfg: TafnetConfig,
    seeds: Iterable[int] = range(10),
    names: Optional[Iterable[str]] = None,
) -> List[CheckResult]:
    """Run the selected checks (all by default) once per seed"""
    names = list(names) if names is not None else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")

    results = []
    for name in names:
        check, tolerance = CHECKS[name]
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)] + [ord(ch) for ch in name])
            result = CheckResult(name, seed, check(rng, cfg), tolerance)
            results.append(result)
            if not result.passed:
                logger.warning("Gradient check %s (seed %d) failed: %.3g >= %.0e", name, seed, result.error, tolerance)
    return results


def format_results(results: List[CheckResult]) -> str:
    lines = []
    for name in dict.fromkeys(r.name for r in results):
        group = [r for r in results if r.name == name]
        worst = max(r.error for r in group)
        status = "ok" if all(r.passed for r in group) else "FAIL"
        lines.append(f"{name:<20} {status:<4} worst {worst:.3e} (tol {group[0].tolerance:.0e}, {len(group)} seeds)")
    return "\n".join(lines) + "\n"
