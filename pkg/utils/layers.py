"""VGG16-style stages, CBAM attention and pyramid pooling.

Every block comes as a `build_*` function that registers its parameters
under a `ParamScope`, and a forward function that reads them back by name.
"""
import zlib
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from utils.config import AttentionConfig, PyramidConfig
from utils.errors import ShapeError
from utils.tensor_core import (
    ParamScope,
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
    linear,
    maxpool2d,
    relu,
    scale_channels,
    scale_pixels,
    sigmoid,
)

VGG_CONV_COUNTS = (2, 2, 3, 3, 3)
VGG_WIDTHS = (64, 128, 256, 512, 512)


@dataclass(frozen=True)
class VggStageConfig:
    stage_index: int
    conv_count: int
    in_channels: int
    out_channels: int


def stage_width(stage_index: int, width_multiplier: float) -> int:
    return int(round(width_multiplier * VGG_WIDTHS[stage_index - 1]))


def vgg_stage_configs(in_channels: int, width_multiplier: float) -> List[VggStageConfig]:
    """The five VGG16 stages for an input with `in_channels` channels"""
    stages = []
    for index, conv_count in enumerate(VGG_CONV_COUNTS, start=1):
        out_channels = stage_width(index, width_multiplier)
        if out_channels < 4:
            raise ShapeError(f"stage {index} would have {out_channels} channels, need at least 4")
        stages.append(VggStageConfig(index, conv_count, in_channels, out_channels))
        in_channels = out_channels
    return stages


def he_normal(scope: ParamScope, name: str, shape: Tuple[int, ...], seed: int):
    """Zero-mean normal with std sqrt(2 / fan_in).

    Each parameter draws from its own stream keyed by its full name, so a
    parameter gets the same initial value in every model that contains it.
    """
    full_name = scope.full_name(name)
    rng = np.random.default_rng([seed, zlib.crc32(full_name.encode("utf-8"))])
    fan_in = int(np.prod(shape[1:]))
    return scope.add(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def build_conv(scope: ParamScope, name: str, c_in: int, c_out: int, k: int, seed: int):
    he_normal(scope, f"{name}.weight", (c_out, c_in, k, k), seed)
    scope.add(f"{name}.bias", np.zeros(c_out))


def build_linear(scope: ParamScope, name: str, d_in: int, d_out: int, seed: int):
    he_normal(scope, f"{name}.weight", (d_out, d_in), seed)
    scope.add(f"{name}.bias", np.zeros(d_out))


def apply_conv(x: Tensor, scope: ParamScope, name: str, pad: int = 0) -> Tensor:
    return conv2d(x, scope[f"{name}.weight"], scope[f"{name}.bias"], stride=1, pad=pad)


# --- VGG stage ---

def build_vgg_stage(scope: ParamScope, cfg: VggStageConfig, seed: int):
    c_in = cfg.in_channels
    for j in range(1, cfg.conv_count + 1):
        build_conv(scope, f"conv{j}", c_in, cfg.out_channels, 3, seed)
        c_in = cfg.out_channels


def vgg_stage_forward(x: Tensor, cfg: VggStageConfig, scope: ParamScope) -> Tensor:
    """conv_count x (3x3 conv, pad 1 -> relu), then 2x2 max pooling"""
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"stage {cfg.stage_index} expects {cfg.in_channels} input channels, got shape {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"stage {cfg.stage_index}: spatial dims must be even before pooling, got {x.shape}")
    for j in range(1, cfg.conv_count + 1):
        x = relu(apply_conv(x, scope, f"conv{j}", pad=1))
    return maxpool2d(x)


# --- attention ---

def build_channel_attention(scope: ParamScope, channels: int, cfg: AttentionConfig, seed: int):
    hidden = cfg.bottleneck(channels)
    build_linear(scope, "fc1", channels, hidden, seed)
    build_linear(scope, "fc2", hidden, channels, seed)


def _shared_mlp(v: Tensor, scope: ParamScope) -> Tensor:
    hidden = relu(linear(v, scope["fc1.weight"], scope["fc1.bias"]))
    return linear(hidden, scope["fc2.weight"], scope["fc2.bias"])


def channel_attention(features: Tensor, scope: ParamScope, cfg: AttentionConfig) -> Tensor:
    """Scale channels by sigmoid(MLP(avg) + MLP(max)); the MLP is shared"""
    weights = sigmoid(add(_shared_mlp(global_avg(features), scope), _shared_mlp(global_max(features), scope)))
    return scale_channels(features, weights)


def build_spatial_attention(scope: ParamScope, cfg: AttentionConfig, seed: int):
    build_conv(scope, "conv", 2, 1, cfg.spatial_kernel, seed)


def spatial_attention(features: Tensor, scope: ParamScope, cfg: AttentionConfig) -> Tensor:
    """Scale pixels by sigmoid(conv([channel mean; channel max]))"""
    descriptor = concat_channels(channel_mean(features), channel_max(features))
    gate = sigmoid(apply_conv(descriptor, scope, "conv", pad=(cfg.spatial_kernel - 1) // 2))
    return scale_pixels(features, gate)


# --- pyramid pooling ---

def build_pyramid_pooling(scope: ParamScope, channels: int, cfg: PyramidConfig, seed: int):
    groups = 1 + len(cfg.bin_sizes)
    build_conv(scope, "proj", channels * groups, channels, 1, seed)


def pyramid_branches(features: Tensor, cfg: PyramidConfig) -> List[Tensor]:
    """Pool to each b x b grid and upsample back to the feature size"""
    h, w = features.shape[2], features.shape[3]
    return [bilinear_upsample(adaptive_avgpool2d(features, b, b), h, w) for b in cfg.clamped(h, w)]


def pyramid_pooling(features: Tensor, scope: ParamScope, cfg: PyramidConfig) -> Tensor:
    """Contextual information: same shape as `features`"""
    stacked = concat_channels(features, *pyramid_branches(features, cfg))
    return relu(apply_conv(stacked, scope, "proj"))
