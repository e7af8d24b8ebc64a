"""Three-stream RGB-T counting network with an Information Improvement Module.

The main stream reads the 4-channel concat of RGB and thermal; two auxiliary
streams read each modality alone. After every stage the IIM adds gated
residual context from both modalities onto the main-stream feature, and
that improved feature feeds the next main stage. A regression header turns
the stage-5 feature into a 1/8-resolution density map.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.config import TafnetConfig, Variant
from utils.errors import ShapeError, ValidationError
from utils.layers import (
    VggStageConfig,
    apply_conv,
    build_channel_attention,
    build_conv,
    build_pyramid_pooling,
    build_spatial_attention,
    build_vgg_stage,
    channel_attention,
    pyramid_pooling,
    spatial_attention,
    vgg_stage_configs,
    vgg_stage_forward,
)
from utils.tensor_core import (
    ModelParams,
    ParamScope,
    Tensor,
    add,
    bilinear_upsample,
    concat_channels,
    relu,
    scale_scalar,
    sigmoid,
    sub,
)

logger = logging.getLogger(__name__)

STREAM_CHANNELS = {"main": 4, "aux.rgb": 3, "aux.thermal": 1}
# density maps live at 1/8 of the input resolution
DENSITY_STRIDE = 8
MODALITIES = ("rgb", "thermal")


@dataclass
class StageFeatures:
    """Per-stage thermal, RGB, combination and improved combination features.

    In the baseline variant there are no auxiliary streams: `f_t` and
    `f_rgb` are None and `f_cimp` is `f_c` itself.
    """

    f_t: Optional[Tensor]
    f_rgb: Optional[Tensor]
    f_c: Tensor
    f_cimp: Tensor

    def __post_init__(self):
        for name in ("f_t", "f_rgb", "f_cimp"):
            other = getattr(self, name)
            if other is not None and other.shape != self.f_c.shape:
                raise ShapeError(f"{name} shape {other.shape} differs from f_c shape {self.f_c.shape}")


def header_widths(width_multiplier: float) -> Tuple[int, int]:
    return max(4, int(round(256 * width_multiplier))), max(4, int(round(128 * width_multiplier)))


def stream_stages(cfg: TafnetConfig) -> Dict[str, List[VggStageConfig]]:
    return {stream: vgg_stage_configs(c_in, cfg.width_multiplier) for stream, c_in in STREAM_CHANNELS.items()}


def build_iim(scope: ParamScope, channels: int, cfg: TafnetConfig, seed: int):
    for path in ("t", "rgb", "c"):
        build_pyramid_pooling(scope.scope(f"{path}.pyramid"), channels, cfg.pyramid, seed)
    if cfg.variant is Variant.FULL:
        build_channel_attention(scope.scope("attn.channel"), channels, cfg.attention, seed)
        build_spatial_attention(scope.scope("attn.spatial"), cfg.attention, seed)
    scope.add("gate_t", np.full(1, cfg.gate_init))
    scope.add("gate_rgb", np.full(1, cfg.gate_init))


def build_header(scope: ParamScope, in_channels: int, cfg: TafnetConfig, seed: int):
    hidden1, hidden2 = header_widths(cfg.width_multiplier)
    build_conv(scope, "conv1", in_channels, hidden1, 3, seed)
    build_conv(scope, "conv2", hidden1, hidden2, 3, seed)
    build_conv(scope, "conv3", hidden2, 1, 1, seed)


def build_tafnet(cfg: TafnetConfig, seed: int = 0) -> ModelParams:
    """Create every parameter of the configured variant, deterministically from `seed`"""
    cfg.validate()
    model = ModelParams(cfg)
    streams = stream_stages(cfg)
    if cfg.variant is Variant.BASELINE:
        streams = {"main": streams["main"]}

    for stream, stages in streams.items():
        for stage in stages:
            build_vgg_stage(model.scope(f"{stream}.stage{stage.stage_index}"), stage, seed)

    if cfg.variant is not Variant.BASELINE:
        for stage in streams["main"]:
            build_iim(model.scope(f"iim.stage{stage.stage_index}"), stage.out_channels, cfg, seed)

    build_header(model.scope("head"), streams["main"][-1].out_channels, cfg, seed)

    logger.debug("Built %s model: %d tensors, %d values", cfg.variant.value, len(model), model.num_values())
    return model


def _gate_weight(scope: ParamScope, name: str, gate_override: Optional[float]) -> Tensor:
    if gate_override is not None:
        return Tensor(np.full(1, gate_override))
    return sigmoid(scope[name])


def iim_forward(
    f_t: Tensor,
    f_rgb: Tensor,
    f_c: Tensor,
    scope: ParamScope,
    cfg: TafnetConfig,
    variant: Variant,
    gate_override: Optional[float] = None,
) -> Tensor:
    """F_Cimp = F_C + w_T * (CI_T - CI_C) + w_RGB * (CI_RGB - CI_C).

    `gate_override` replaces both sigmoid gate weights with a constant.
    """
    if not f_t.shape == f_rgb.shape == f_c.shape:
        raise ShapeError(f"IIM inputs differ in shape: {f_t.shape}, {f_rgb.shape}, {f_c.shape}")
    if variant is Variant.BASELINE:
        raise ValidationError("the baseline variant has no IIM")

    ci_t = pyramid_pooling(f_t, scope.scope("t.pyramid"), cfg.pyramid)
    ci_rgb = pyramid_pooling(f_rgb, scope.scope("rgb.pyramid"), cfg.pyramid)
    ci_c = pyramid_pooling(f_c, scope.scope("c.pyramid"), cfg.pyramid)

    if variant is Variant.FULL:
        if "attn.channel.fc1.weight" not in scope:
            raise ValidationError(f"{scope.prefix}: model was built without attention parameters")
        # thermal context only
        ci_t = channel_attention(ci_t, scope.scope("attn.channel"), cfg.attention)
        ci_t = spatial_attention(ci_t, scope.scope("attn.spatial"), cfg.attention)

    ri_ct = sub(ci_t, ci_c)
    ri_crgb = sub(ci_rgb, ci_c)
    improved = add(f_c, scale_scalar(ri_ct, _gate_weight(scope, "gate_t", gate_override)))
    return add(improved, scale_scalar(ri_crgb, _gate_weight(scope, "gate_rgb", gate_override)))


def regression_header(f5: Tensor, scope: ParamScope) -> Tensor:
    """x4 upsample, 3x3 conv, relu, 3x3 conv, relu, 1x1 conv, relu"""
    h, w = f5.shape[2], f5.shape[3]
    x = bilinear_upsample(f5, 4 * h, 4 * w)
    x = relu(apply_conv(x, scope, "conv1", pad=1))
    x = relu(apply_conv(x, scope, "conv2", pad=1))
    return relu(apply_conv(x, scope, "conv3"))


def _check_inputs(rgb: Tensor, thermal: Tensor):
    if rgb.data.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"rgb must be (n, 3, H, W), got {rgb.shape}")
    if thermal.data.ndim != 4 or thermal.shape[1] != 1:
        raise ShapeError(f"thermal must be (n, 1, H, W), got {thermal.shape}")
    if (rgb.shape[0], *rgb.shape[2:]) != (thermal.shape[0], *thermal.shape[2:]):
        raise ShapeError(f"rgb {rgb.shape} and thermal {thermal.shape} differ in batch or size")
    h, w = rgb.shape[2:]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be divisible by 32")


def forward(
    rgb: Tensor,
    thermal: Tensor,
    model: ModelParams,
    variant: Optional[Variant] = None,
    *,
    gate_override: Optional[float] = None,
    drop_modality: Optional[str] = None,
    return_stages: bool = False,
):
    """Density map (n, 1, H/8, W/8) for normalized inputs.

    `variant` defaults to the model's own; a baseline pass over a full model
    uses only its main stream and header. `drop_modality` replaces one
    normalized modality by zeros wherever it enters the network: the
    main-stream concat and that modality's auxiliary stream.
    With `return_stages` the result is `(density, [StageFeatures, ...])`.
    """
    cfg: TafnetConfig = model.config
    variant = Variant(variant) if variant is not None else cfg.variant
    _check_inputs(rgb, thermal)
    if variant is not Variant.BASELINE and "aux.rgb.stage1.conv1.weight" not in model:
        raise ValidationError(f"a {cfg.variant.value} model cannot run as {variant.value}")
    if variant is Variant.FULL and cfg.variant is not Variant.FULL:
        raise ValidationError(f"a {cfg.variant.value} model has no attention parameters")

    if drop_modality is not None:
        if drop_modality not in MODALITIES:
            raise ValidationError(f"drop_modality must be one of {MODALITIES}, got {drop_modality!r}")
        if drop_modality == "rgb":
            rgb = Tensor(np.zeros(rgb.shape))
        else:
            thermal = Tensor(np.zeros(thermal.shape))

    streams = stream_stages(cfg)
    main = concat_channels(rgb, thermal)
    aux = {"rgb": rgb, "thermal": thermal}
    stages = []
    for stage in streams["main"]:
        i = stage.stage_index
        f_c = vgg_stage_forward(main, stage, model.scope(f"main.stage{i}"))
        if variant is Variant.BASELINE:
            main = f_c
            stages.append(StageFeatures(None, None, f_c, f_c))
            continue
        for modality in MODALITIES:
            aux[modality] = vgg_stage_forward(
                aux[modality], streams[f"aux.{modality}"][i - 1], model.scope(f"aux.{modality}.stage{i}")
            )
        main = iim_forward(
            aux["thermal"], aux["rgb"], f_c, model.scope(f"iim.stage{i}"), cfg, variant, gate_override
        )
        stages.append(StageFeatures(aux["thermal"], aux["rgb"], f_c, main))

    density = regression_header(main, model.scope("head"))
    if return_stages:
        return density, stages
    return density


def count(density: Tensor) -> np.ndarray:
    """Per-item predicted counts (spatial sums)"""
    if density.data.ndim != 4 or density.shape[1] != 1:
        raise ShapeError(f"density map must be (n, 1, h, w), got {density.shape}")
    return density.data.sum(axis=(1, 2, 3))
