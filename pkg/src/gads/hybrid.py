"""GADS-Hybrid: the landmark model fused with a small LeNet-style image branch."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import IMAGE_SIZE, PoseAngles
from .model import (
    ConfigError,
    Dense,
    GadsConfig,
    GadsParams,
    _layer_shapes,
    gads_forward,
    init_tensors,
    params_from_named,
)
from .preprocess import GroupedLandmarks
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class HybridConfig:
    gads: GadsConfig = field(default_factory=GadsConfig)
    conv_blocks: int = 3
    conv_channels: int = 16
    kernel: int = 5
    fc_widths: tuple[int, ...] = (32, 16)
    fusion_layers: int = 1
    fusion_hidden: int = 16
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))

    def spatial_trace(self) -> list[int]:
        sizes = [self.image_size]
        for _ in range(self.conv_blocks):
            conv = sizes[-1] - self.kernel + 1
            if conv < 2:
                raise ConfigError(f"image too small for {self.conv_blocks} conv blocks: {sizes + [conv]}")
            sizes += [conv, conv // 2]
        return sizes

    @property
    def flatten_width(self) -> int:
        return self.conv_channels * self.spatial_trace()[-1] ** 2

    def validate(self) -> "HybridConfig":
        self.gads.validate()
        if self.conv_blocks < 1 or self.conv_channels < 1 or self.kernel < 1:
            raise ConfigError("conv_blocks, conv_channels and kernel must be >= 1")
        if not self.fc_widths or min(self.fc_widths) < 1:
            raise ConfigError(f"fc_widths must be positive, got {self.fc_widths}")
        if self.fusion_layers < 1:
            raise ConfigError(f"fusion_layers must be >= 1, got {self.fusion_layers}")
        self.spatial_trace()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gads"] = self.gads.to_dict()
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HybridConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hybrid settings: {sorted(unknown)}")
        gads = d.pop("gads", {})
        return cls(gads=gads if isinstance(gads, GadsConfig) else GadsConfig.from_dict(gads), **d)


@dataclass
class ConvBlock:
    filters: Tensor
    bias: Tensor


@dataclass
class CnnParams:
    blocks: list[ConvBlock]
    fc: list[Dense]


@dataclass
class HybridParams:
    config: HybridConfig
    gads: GadsParams
    cnn: CnnParams
    fusion: list[Dense]

    def named(self) -> dict[str, Tensor]:
        out = {f"gads.{k}": v for k, v in self.gads.named().items()}
        for i, blk in enumerate(self.cnn.blocks):
            out[f"cnn.conv{i}.filters"] = blk.filters
            out[f"cnn.conv{i}.b"] = blk.bias
        for i, layer in enumerate(self.cnn.fc):
            out[f"cnn.fc{i}.W"] = layer.W
            out[f"cnn.fc{i}.b"] = layer.b
        for i, layer in enumerate(self.fusion):
            out[f"fusion{i}.W"] = layer.W
            out[f"fusion{i}.b"] = layer.b
        return out


def _cnn_shapes(config: HybridConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in, k, c = 3, config.kernel, config.conv_channels
    for i in range(config.conv_blocks):
        shapes[f"cnn.conv{i}.filters"] = (c, c_in, k, k)
        shapes[f"cnn.conv{i}.b"] = (c,)
        c_in = c
    width = config.flatten_width
    for i, w in enumerate(config.fc_widths):
        shapes[f"cnn.fc{i}.W"] = (width, w)
        shapes[f"cnn.fc{i}.b"] = (w,)
        width = w
    width = 3 + config.fc_widths[-1]
    for i in range(config.fusion_layers):
        w = 3 if i == config.fusion_layers - 1 else config.fusion_hidden
        shapes[f"fusion{i}.W"] = (width, w)
        shapes[f"fusion{i}.b"] = (w,)
        width = w
    return shapes


def hybrid_shapes(config: HybridConfig) -> dict[str, tuple[int, ...]]:
    shapes = {f"gads.{k}": v for k, v in _layer_shapes(config.gads).items()}
    shapes.update(_cnn_shapes(config))
    return shapes


def hybrid_params_from_named(config: HybridConfig, named: dict[str, Tensor]) -> HybridParams:
    config.validate()
    shapes = _cnn_shapes(config)
    for k, shape in shapes.items():
        if k not in named:
            raise ConfigError(f"missing parameter {k}")
        if named[k].shape != shape:
            raise DimensionError(f"parameter {k}: expected shape {shape}, got {named[k].shape}")
    gads = params_from_named(config.gads, {k[5:]: v for k, v in named.items() if k.startswith("gads.")})
    blocks = [ConvBlock(named[f"cnn.conv{i}.filters"], named[f"cnn.conv{i}.b"]) for i in range(config.conv_blocks)]
    fc = [Dense(named[f"cnn.fc{i}.W"], named[f"cnn.fc{i}.b"]) for i in range(len(config.fc_widths))]
    fusion = [Dense(named[f"fusion{i}.W"], named[f"fusion{i}.b"]) for i in range(config.fusion_layers)]
    return HybridParams(config, gads, CnnParams(blocks, fc), fusion)


def init_hybrid_params(config: HybridConfig, seed: int | np.random.Generator) -> HybridParams:
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return hybrid_params_from_named(config, init_tensors(hybrid_shapes(config), rng))


def cnn_forward(image: Tensor | np.ndarray, params: CnnParams, image_size: int = IMAGE_SIZE) -> Tensor:
    """(conv -> tanh -> 2x2 avg pool) per block, flatten, (linear -> tanh) per fc layer.

    ``image`` is (3, H, W) or (batch, 3, H, W) with H = W = ``image_size``.
    """
    x = T.as_tensor(image)
    if x.data.ndim not in (3, 4) or x.shape[-3:] != (3, image_size, image_size):
        raise DimensionError(f"image must be (.., 3, {image_size}, {image_size}), got {x.shape}")
    for blk in params.blocks:
        x = T.avg_pool2(T.activate(T.conv2d(x, blk.filters, blk.bias), "tanh"))
    lead = x.shape[:-3]
    x = T.reshape(x, lead + (int(np.prod(x.shape[-3:])),))
    for layer in params.fc:
        x = T.activate(layer(x), "tanh")
    return x


def hybrid_forward(
    groups: GroupedLandmarks | Sequence[np.ndarray | Tensor],
    image: Tensor | np.ndarray,
    params: HybridParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    j1 = gads_forward(groups, params.gads, training, rng)
    j2 = cnn_forward(image, params.cnn, params.config.image_size)
    if j1.shape[:-1] != j2.shape[:-1]:
        raise DimensionError(f"landmark batch {j1.shape} and image batch {j2.shape} differ")
    h = T.concat([j1, j2], axis=-1)
    for i, layer in enumerate(params.fusion):
        h = layer(h)
        if i < len(params.fusion) - 1:
            h = T.activate(h, params.config.gads.activation)
    return h


def count_hybrid_params(params: HybridParams) -> int:
    return int(sum(t.size for t in params.named().values()))


def predict_pose_hybrid(groups: GroupedLandmarks, image: np.ndarray, params: HybridParams) -> PoseAngles:
    return PoseAngles.from_array(hybrid_forward(groups, image, params).data)
