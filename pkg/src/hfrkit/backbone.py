"""Miniature hybrid CNN-Transformer embedding backbone.

Layout: patchify conv stem -> three stages of depthwise-conv blocks (with a
single-head attention block appended in the later stages) -> global average
pool -> LayerNorm -> linear embedding head. Every parameter is registered
under a named group so training can freeze or adapt whole groups:

- ST:   stem convolution
- S0-2: stage convolutions, pointwise MLPs, attention projections, and the
        downsample convolution feeding the stage
- LN:   all LayerNorm gamma/beta tensors, wherever they occur
- HEAD: the final embedding projection
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _node,
    attention,
    conv2d,
    depthwise_conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    reshape,
    transpose,
)


class ParameterGroup(enum.Enum):
    LN = "LN"
    ST = "ST"
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    HEAD = "HEAD"


STAGE_GROUPS = (ParameterGroup.S0, ParameterGroup.S1, ParameterGroup.S2)


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    input_size: int = 32
    stem_kernel: int = 4
    stem_stride: int = 4
    stage_channels: tuple = (8, 16, 32)
    stage_depths: tuple = (2, 2, 2)
    attention_stages: frozenset = frozenset({1, 2})
    embed_dim: int = 32
    ln_epsilon: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "attention_stages", frozenset(self.attention_stages))
        if len(self.stage_channels) != 3 or len(self.stage_depths) != 3:
            raise ValueError("backbone has exactly three stages")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.ln_epsilon <= 0:
            raise ValueError(f"ln_epsilon must be > 0, got {self.ln_epsilon}")
        if self.input_size % self.stem_stride != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by stem_stride {self.stem_stride}"
            )
        size = self.input_size // self.stem_stride
        for stage in range(1, 3):
            if size % 2 != 0:
                raise ValueError(
                    f"spatial size {size} entering stage {stage} not divisible by downsample 2"
                )
            size //= 2
        if not self.attention_stages <= {0, 1, 2}:
            raise ValueError(f"attention_stages must be within {{0,1,2}}: {self.attention_stages}")

    def stage_spatial(self, stage: int) -> int:
        """Feature-map side length inside the given stage."""
        return self.input_size // self.stem_stride // (2**stage)


@dataclass
class Param:
    name: str
    group: ParameterGroup
    tensor: Tensor


class Model:
    """Ordered registry of named, group-tagged parameters plus its config.

    Inference is stateless: ``forward(model, x)`` depends only on the
    registered tensors and the input.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.params: list[Param] = []
        self._index: dict[str, Param] = {}

    def register(self, name: str, group: ParameterGroup, data: np.ndarray) -> Tensor:
        if name in self._index:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        p = Param(name, group, t)
        self.params.append(p)
        self._index[name] = p
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._index[name].tensor

    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params]

    def trainable(self) -> list[Param]:
        return [p for p in self.params if p.tensor.requires_grad]

    def zero_grads(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def copy(self) -> "Model":
        """Deep copy: fresh tensors with identical bits and trainability flags."""
        clone = Model(self.config)
        for p in self.params:
            t = clone.register(p.name, p.group, p.tensor.data.copy())
            t.requires_grad = p.tensor.requires_grad
            if not t.requires_grad:
                t.grad = None
        return clone


def _uniform_fanin(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def build(config: BackboneConfig, seed: int) -> Model:
    """Deterministically initialize a model: fan-in uniform conv/linear
    weights, zero biases, gamma=1 / beta=0 for every LayerNorm."""
    model = Model(config)
    rng = np.random.default_rng(seed)
    ch = config.stage_channels

    def conv_param(name, group, out_c, in_c, k):
        model.register(f"{name}.weight", group, _uniform_fanin(rng, (out_c, in_c, k, k), in_c * k * k))
        model.register(f"{name}.bias", group, np.zeros(out_c))

    def norm_param(name, dim):
        model.register(f"{name}.gamma", ParameterGroup.LN, np.ones(dim))
        model.register(f"{name}.beta", ParameterGroup.LN, np.zeros(dim))

    conv_param("stem.conv", ParameterGroup.ST, ch[0], config.input_channels, config.stem_kernel)
    norm_param("stem.norm", ch[0])

    for s, group in enumerate(STAGE_GROUPS):
        if s > 0:
            conv_param(f"s{s}.down.conv", group, ch[s], ch[s - 1], 2)
            norm_param(f"s{s}.down.norm", ch[s])
        c = ch[s]
        for b in range(config.stage_depths[s]):
            prefix = f"s{s}.block{b}"
            model.register(
                f"{prefix}.dwconv.weight", group, _uniform_fanin(rng, (c, 1, 3, 3), 9)
            )
            model.register(f"{prefix}.dwconv.bias", group, np.zeros(c))
            norm_param(f"{prefix}.norm", c)
            model.register(f"{prefix}.mlp1.weight", group, _uniform_fanin(rng, (2 * c, c), c))
            model.register(f"{prefix}.mlp1.bias", group, np.zeros(2 * c))
            model.register(f"{prefix}.mlp2.weight", group, _uniform_fanin(rng, (c, 2 * c), 2 * c))
            model.register(f"{prefix}.mlp2.bias", group, np.zeros(c))
        if s in config.attention_stages:
            norm_param(f"s{s}.attn.norm", c)
            for proj in ("wq", "wk", "wv", "wo"):
                model.register(f"s{s}.attn.{proj}", group, _uniform_fanin(rng, (c, c), c))

    norm_param("head.norm", ch[2])
    model.register("head.fc.weight", ParameterGroup.HEAD, _uniform_fanin(rng, (config.embed_dim, ch[2]), ch[2]))
    model.register("head.fc.bias", ParameterGroup.HEAD, np.zeros(config.embed_dim))
    return model


def _ln_nchw(model: Model, x: Tensor, name: str, n: int, c: int, side: int) -> Tensor:
    """LayerNorm over the channel axis of an NCHW map (normalize channels-last)."""
    t = transpose(x, (0, 2, 3, 1))
    t = layer_norm(t, model[f"{name}.gamma"], model[f"{name}.beta"], model.config.ln_epsilon)
    return transpose(t, (0, 3, 1, 2))


def _block(model: Model, x: Tensor, prefix: str, n: int, c: int, side: int) -> Tensor:
    h = depthwise_conv2d(x, model[f"{prefix}.dwconv.weight"], model[f"{prefix}.dwconv.bias"], padding=1)
    h = transpose(h, (0, 2, 3, 1))
    h = layer_norm(h, model[f"{prefix}.norm.gamma"], model[f"{prefix}.norm.beta"], model.config.ln_epsilon)
    flat = reshape(h, (n * side * side, c))
    flat = linear(flat, model[f"{prefix}.mlp1.weight"], model[f"{prefix}.mlp1.bias"])
    flat = gelu(flat)
    flat = linear(flat, model[f"{prefix}.mlp2.weight"], model[f"{prefix}.mlp2.bias"])
    h = transpose(reshape(flat, (n, side, side, c)), (0, 3, 1, 2))
    return x + h


def _attention_block(model: Model, x: Tensor, stage: int, n: int, c: int, side: int) -> Tensor:
    tokens = reshape(transpose(x, (0, 2, 3, 1)), (n, side * side, c))
    normed = layer_norm(
        tokens, model[f"s{stage}.attn.norm.gamma"], model[f"s{stage}.attn.norm.beta"], model.config.ln_epsilon
    )
    att = attention(
        normed,
        model[f"s{stage}.attn.wq"],
        model[f"s{stage}.attn.wk"],
        model[f"s{stage}.attn.wv"],
        model[f"s{stage}.attn.wo"],
    )
    mixed = tokens + att
    return transpose(reshape(mixed, (n, side, side, c)), (0, 3, 1, 2))


def forward(model: Model, batch: Tensor) -> Tensor:
    """Embed a batch of images: (N, 3, S, S) -> raw embeddings (N, D)."""
    cfg = model.config
    if batch.data.ndim != 4:
        raise ShapeError(f"forward expects NCHW batch, got shape {batch.data.shape}")
    n, c, h, w = batch.data.shape
    if c != cfg.input_channels:
        raise ShapeError(f"forward: channel axis 1 = {c}, expected {cfg.input_channels}")
    if h != cfg.input_size or w != cfg.input_size:
        raise ShapeError(f"forward: spatial size {h}x{w}, expected {cfg.input_size}x{cfg.input_size}")

    x = conv2d(batch, model["stem.conv.weight"], model["stem.conv.bias"], stride=cfg.stem_stride)
    side = cfg.input_size // cfg.stem_stride
    x = _ln_nchw(model, x, "stem.norm", n, cfg.stage_channels[0], side)

    for s in range(3):
        cs = cfg.stage_channels[s]
        if s > 0:
            x = conv2d(x, model[f"s{s}.down.conv.weight"], model[f"s{s}.down.conv.bias"], stride=2)
            side //= 2
            x = _ln_nchw(model, x, f"s{s}.down.norm", n, cs, side)
        for b in range(cfg.stage_depths[s]):
            x = _block(model, x, f"s{s}.block{b}", n, cs, side)
        if s in cfg.attention_stages:
            x = _attention_block(model, x, s, n, cs, side)

    pooled = global_avg_pool(x)
    pooled = layer_norm(pooled, model["head.norm.gamma"], model["head.norm.beta"], cfg.ln_epsilon)
    return linear(pooled, model["head.fc.weight"], model["head.fc.bias"])


def replicate_channels(image: Tensor) -> Tensor:
    """Triplicate a single-channel batch: (N, 1, S, S) -> (N, 3, S, S)."""
    if image.data.ndim != 4 or image.data.shape[1] != 1:
        raise ShapeError(f"replicate_channels expects channel axis 1 = 1, got shape {image.data.shape}")
    out = np.repeat(image.data, 3, axis=1)

    def bw(g):
        return ((image, g.sum(axis=1, keepdims=True)),)

    return _node(out, (image,), bw)


def replicate_channels_array(image: np.ndarray) -> np.ndarray:
    """Array variant for dataset plumbing: (1, S, S) -> (3, S, S)."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"expected (1, S, S) array, got {image.shape}")
    return np.repeat(image, 3, axis=0)


def count_parameters(model: Model) -> tuple[int, dict[ParameterGroup, int]]:
    """Total scalar count and the per-group breakdown."""
    per_group = {g: 0 for g in ParameterGroup}
    for p in model.params:
        per_group[p.group] += p.tensor.size
    return sum(per_group.values()), per_group


def ln_layer_count(model: Model) -> int:
    """Number of LayerNorm layers K (gamma/beta pairs) in the topology."""
    return sum(1 for p in model.params if p.group == ParameterGroup.LN and p.name.endswith(".gamma"))


def estimate_flops(model: Model) -> int:
    """Analytic multiply-accumulate count for one sample.

    Counts conv, linear, and attention matmul MACs; normalization,
    activations, and pooling contribute no multiply-accumulates.
    """
    cfg = model.config
    ch = cfg.stage_channels
    macs = 0

    side = cfg.input_size // cfg.stem_stride
    macs += ch[0] * cfg.input_channels * cfg.stem_kernel**2 * side * side

    for s in range(3):
        c = ch[s]
        if s > 0:
            side //= 2
            macs += c * ch[s - 1] * 4 * side * side
        for _ in range(cfg.stage_depths[s]):
            macs += c * 9 * side * side          # depthwise 3x3
            macs += 2 * c * c * side * side      # mlp expand
            macs += c * 2 * c * side * side      # mlp project
        if s in cfg.attention_stages:
            t = side * side
            macs += 4 * t * c * c                # q, k, v, o projections
            macs += 2 * t * t * c                # scores and weighted sum
    macs += cfg.embed_dim * ch[2]                # embedding head
    return macs
