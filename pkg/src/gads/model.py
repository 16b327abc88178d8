"""Grouped Attention Deep Sets: per-region set encoders fused by multi-head self-attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PoseAngles
from .preprocess import DEFAULT_GROUPS, GroupedLandmarks
from .tensor import Activation, DimensionError, Tensor


class ConfigError(ValueError):
    pass


INVARIANTS = ("max", "sum", "mean", "min")
ABLATION_ACTIVATIONS = ("relu", "leaky_relu", "gelu", "sigmoid")


@dataclass(frozen=True)
class GadsConfig:
    """Architecture knobs. Defaults give the 22 499-parameter model.

    ``decoder_layers`` is the depth of each Deep Set decoder; with more than
    one layer its intermediate width is ``decoder_hidden``. ``final_layers``
    counts the Linear+activation pairs ahead of the 3-unit output, with widths
    starting at ``final_width`` and halving.
    """

    embedding_dim: int = 32
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    decoder_hidden: int = 64
    final_layers: int = 2
    final_width: int = 64
    activation: str = "relu"
    invariant: str = "max"
    dropout: float = 0.0
    group_sizes: tuple[int, ...] = DEFAULT_GROUPS.sizes
    experimental: bool = False

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        object.__setattr__(self, "activation", Activation.parse(self.activation).value)

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.heads

    @property
    def final_widths(self) -> list[int]:
        return [max(1, self.final_width >> k) for k in range(self.final_layers)]

    def validate(self) -> "GadsConfig":
        for name in ("embedding_dim", "heads", "encoder_layers", "decoder_layers", "decoder_hidden", "final_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.final_layers < 0:
            raise ConfigError(f"final_layers must be >= 0, got {self.final_layers}")
        if self.embedding_dim % self.heads:
            raise ConfigError(f"embedding_dim {self.embedding_dim} is not divisible by heads {self.heads}")
        if self.invariant not in INVARIANTS:
            raise ConfigError(f"invariant must be one of {INVARIANTS}, got {self.invariant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.group_sizes or min(self.group_sizes) < 1:
            raise ConfigError(f"group sizes must be positive, got {self.group_sizes}")
        if self.experimental:
            return self
        # outside the ablation grid needs the experimental flag
        checks = [
            (self.embedding_dim == 32, "embedding_dim"),
            (self.heads in (2, 4, 8), "heads"),
            (self.encoder_layers == 1, "encoder_layers"),
            (1 <= self.decoder_layers <= 4, "decoder_layers"),
            (1 <= self.final_layers <= 3, "final_layers"),
            (self.activation in ABLATION_ACTIVATIONS, "activation"),
            (self.dropout <= 0.2, "dropout"),
        ]
        for ok, name in checks:
            if not ok:
                raise ConfigError(f"{name}={getattr(self, name)!r} is outside the ablation grid; set experimental=true")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_sizes"] = list(self.group_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GadsConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W, self.b)


@dataclass
class DeepSetLayerParams:
    encoder: list[Dense]
    decoder: list[Dense]
    invariant: str = "max"
    activation: str = "relu"


@dataclass
class AttentionParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def heads(self) -> int:
        return len(self.wq)


@dataclass
class GadsParams:
    config: GadsConfig
    deepsets: list[DeepSetLayerParams]
    attention: AttentionParams
    decoder: list[Dense]
    output: Dense = field(repr=False)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, ds in enumerate(self.deepsets):
            for j, layer in enumerate(ds.encoder):
                out[f"deepset{i}.enc{j}.W"] = layer.W
                out[f"deepset{i}.enc{j}.b"] = layer.b
            for j, layer in enumerate(ds.decoder):
                out[f"deepset{i}.dec{j}.W"] = layer.W
                out[f"deepset{i}.dec{j}.b"] = layer.b
        att = self.attention
        for k in range(att.heads):
            out[f"attn.head{k}.q"] = att.wq[k]
            out[f"attn.head{k}.k"] = att.wk[k]
            out[f"attn.head{k}.v"] = att.wv[k]
        out["attn.out"] = att.wo
        for j, layer in enumerate(self.decoder):
            out[f"decoder{j}.W"] = layer.W
            out[f"decoder{j}.b"] = layer.b
        out["output.W"] = self.output.W
        out["output.b"] = self.output.b
        return out


def _layer_shapes(config: GadsConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the single source for init and loading."""
    d = config.embedding_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(len(config.group_sizes)):
        width = 3
        for j in range(config.encoder_layers):
            shapes[f"deepset{i}.enc{j}.W"] = (width, d)
            shapes[f"deepset{i}.enc{j}.b"] = (d,)
            width = d
        dec = [config.decoder_hidden] * (config.decoder_layers - 1) + [d]
        for j, w in enumerate(dec):
            shapes[f"deepset{i}.dec{j}.W"] = (width, w)
            shapes[f"deepset{i}.dec{j}.b"] = (w,)
            width = w
    dk = config.head_dim
    for k in range(config.heads):
        for s in "qkv":
            shapes[f"attn.head{k}.{s}"] = (d, dk)
    shapes["attn.out"] = (config.heads * dk, d)
    width = len(config.group_sizes) * d
    for j, w in enumerate(config.final_widths):
        shapes[f"decoder{j}.W"] = (width, w)
        shapes[f"decoder{j}.b"] = (w,)
        width = w
    shapes["output.W"] = (width, 3)
    shapes["output.b"] = (3,)
    return shapes


def init_tensors(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero."""
    out = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        out[name] = T.parameter(data, name=name)
    return out


def params_from_named(config: GadsConfig, named: dict[str, Tensor]) -> GadsParams:
    config.validate()
    shapes = _layer_shapes(config)
    missing = [k for k in shapes if k not in named]
    if missing:
        raise ConfigError(f"missing parameters: {missing[:5]}")
    for k, shape in shapes.items():
        if named[k].shape != shape:
            raise DimensionError(f"parameter {k}: expected shape {shape}, got {named[k].shape}")
    deepsets = []
    for i in range(len(config.group_sizes)):
        enc = [Dense(named[f"deepset{i}.enc{j}.W"], named[f"deepset{i}.enc{j}.b"]) for j in range(config.encoder_layers)]
        dec = [Dense(named[f"deepset{i}.dec{j}.W"], named[f"deepset{i}.dec{j}.b"]) for j in range(config.decoder_layers)]
        deepsets.append(DeepSetLayerParams(enc, dec, config.invariant, config.activation))
    att = AttentionParams(
        wq=[named[f"attn.head{k}.q"] for k in range(config.heads)],
        wk=[named[f"attn.head{k}.k"] for k in range(config.heads)],
        wv=[named[f"attn.head{k}.v"] for k in range(config.heads)],
        wo=named["attn.out"],
    )
    decoder = [Dense(named[f"decoder{j}.W"], named[f"decoder{j}.b"]) for j in range(config.final_layers)]
    return GadsParams(config, deepsets, att, decoder, Dense(named["output.W"], named["output.b"]))


def init_params(config: GadsConfig, seed: int | np.random.Generator) -> GadsParams:
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return params_from_named(config, init_tensors(_layer_shapes(config), rng))


def count_params(params: GadsParams | dict[str, Tensor]) -> int:
    named = params.named() if isinstance(params, GadsParams) else params
    return int(sum(t.size for t in named.values()))


# ---------------------------------------------------------------------------
# forward pass


def deepset_forward(group: Tensor, params: DeepSetLayerParams) -> Tensor:
    """Encode each row, pool over rows with the invariant, decode: (.., S, 3) -> (.., d)."""
    group = T.as_tensor(group)
    if group.data.ndim < 2 or group.shape[-2] == 0:
        raise T.ContractError(f"deepset_forward needs a non-empty set, got shape {group.shape}")
    h = group
    for layer in params.encoder:
        h = T.activate(layer(h), params.activation)
    z = T.REDUCERS[params.invariant](h)
    for layer in params.decoder:
        z = T.activate(layer(z), params.activation)
    return z


def attention_weights(Z: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    q = T.matmul(Z, wq)
    k = T.matmul(Z, wk)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(wq.shape[1]))
    return T.softmax_rows(logits)


def multihead_self_attention(Z: Tensor, params: AttentionParams, return_weights: bool = False):
    """Self-attention over the rows of ``Z`` (.., M, d) with Q = K = V = Z."""
    Z = T.as_tensor(Z)
    if Z.shape[-1] != params.wq[0].shape[0]:
        raise DimensionError(f"attention input width {Z.shape[-1]} != projection input {params.wq[0].shape[0]}")
    heads, weights = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        a = attention_weights(Z, wq, wk)
        heads.append(T.matmul(a, T.matmul(Z, wv)))
        weights.append(a)
    out = T.matmul(T.concat(heads, axis=-1), params.wo)
    return (out, weights) if return_weights else out


def _as_group_tensors(groups) -> list[Tensor]:
    if isinstance(groups, GroupedLandmarks):
        groups = groups.groups
    return [T.as_tensor(g) for g in groups]


def gads_forward(
    groups: GroupedLandmarks | Sequence[np.ndarray | Tensor],
    params: GadsParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predict (yaw, pitch, roll) in degrees.

    Each group is (S_i, 3) for a single face, giving a (3,) output, or
    (batch, S_i, 3) giving (batch, 3).
    """
    gs = _as_group_tensors(groups)
    cfg = params.config
    if len(gs) != len(params.deepsets):
        raise DimensionError(f"expected {len(params.deepsets)} groups, got {len(gs)}")
    for g, s in zip(gs, cfg.group_sizes):
        if g.data.ndim not in (2, 3) or g.shape[-2:] != (s, 3):
            raise DimensionError(f"group of shape {g.shape} does not match expected (.., {s}, 3)")
    Z = T.stack([deepset_forward(g, p) for g, p in zip(gs, params.deepsets)], axis=-2)
    E = multihead_self_attention(Z, params.attention)
    lead = E.shape[:-2]
    h = T.reshape(E, lead + (E.shape[-2] * E.shape[-1],))
    for layer in params.decoder:
        h = T.activate(layer(h), cfg.activation)
        h = T.dropout(h, cfg.dropout, training, rng)
    return params.output(h)


def predict_pose(groups: GroupedLandmarks, params: GadsParams) -> PoseAngles:
    return PoseAngles.from_array(gads_forward(groups, params).data)
