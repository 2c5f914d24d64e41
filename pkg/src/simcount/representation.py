"""Query/exemplar feature extraction, self-similarity and scale embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_core import (
    ConfigurationError,
    ModelParams,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    conv2d,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    same_padding,
    scale,
    scale_by,
    slice_rows,
    softmax,
    transpose,
)


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 2, 1)
    d: int = 32
    exemplar_size: int = 32
    l_total: int = 20
    gamma_init: float = 0.0

    def __post_init__(self):
        if self.d % 2:
            raise ConfigurationError(f"d must be even, got {self.d}")
        if self.l_total < 1:
            raise ConfigurationError("l_total must be >= 1")
        if len(self.widths) != len(self.strides):
            raise ConfigurationError("widths and strides must have equal length")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass
class FeatureField:
    """Query feature map ``[d, h_x, w_x]`` and its stride relative to the image."""

    map: Tensor
    stride: int

    @property
    def d(self) -> int:
        return self.map.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]


def init_representation(params: ModelParams, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    c_prev = cfg.in_channels
    for i, width in enumerate(cfg.widths):
        fan_in = c_prev * 9
        params.new(f"backbone.conv{i}.weight", rng.normal(0.0, math.sqrt(2.0 / fan_in), (width, c_prev, 3, 3)))
        params.new(f"backbone.conv{i}.bias", np.zeros(width), decay_enabled=False)
        c_prev = width
    d = cfg.d
    params.new("query_proj.weight", rng.normal(0.0, math.sqrt(1.0 / c_prev), (d, c_prev, 1, 1)))
    params.new("query_proj.bias", np.zeros(d), decay_enabled=False)
    params.new("exemplar_proj.weight", rng.normal(0.0, math.sqrt(1.0 / c_prev), (d, c_prev)))
    params.new("exemplar_proj.bias", np.zeros(d), decay_enabled=False)
    params.new("scale_embedding", rng.uniform(-0.1, 0.1, (cfg.l_total, d)), decay_enabled=False)
    for name in ("q", "k", "v"):
        params.new(f"self_sim.{name}.weight", rng.normal(0.0, math.sqrt(1.0 / d), (d, d)))
        params.new(f"self_sim.{name}.bias", np.zeros(d), decay_enabled=False)
    params.new("self_sim.gamma", np.array([cfg.gamma_init]), decay_enabled=False)


def _trunk(image: Tensor, params: ModelParams, cfg: BackboneConfig) -> Tensor:
    x = image
    for i, stride in enumerate(cfg.strides):
        _, h, w = x.shape
        pad = same_padding(h, 3, stride) + same_padding(w, 3, stride)
        x = relu(conv2d(x, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"], stride, pad))
    return x


def extract_query_features(image: Tensor, params: ModelParams, cfg: BackboneConfig) -> FeatureField:
    if image.data.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ConfigurationError(f"expected a [{cfg.in_channels}, h, w] image, got {image.shape}")
    _, h, w = image.shape
    if h % cfg.stride or w % cfg.stride:
        raise ConfigurationError(f"image size {h}x{w} is not a multiple of the backbone stride {cfg.stride}")
    feats = _trunk(image, params, cfg)
    fmap = conv2d(feats, params["query_proj.weight"], params["query_proj.bias"])
    return FeatureField(fmap, cfg.stride)


def resize_nearest(patch: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resample of a [c, h, w] array to [c, size, size]."""
    _, h, w = patch.shape
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return patch[:, rows][:, :, cols]


def crop_exemplar(image: np.ndarray, box: Sequence[int], size: int) -> np.ndarray:
    """Cut box ``(x0, y0, x1, y1)`` (end-exclusive) out of a [c, h, w] image and resize it."""
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 <= image.shape[2] and 0 <= y0 < y1 <= image.shape[1]):
        raise ShapeError(f"box {tuple(box)} outside image of shape {image.shape}")
    return resize_nearest(image[:, y0:y1, x0:x1], size)


def extract_exemplar_feature(crop: Tensor, params: ModelParams, cfg: BackboneConfig) -> Tensor:
    s = cfg.exemplar_size
    if crop.shape != (cfg.in_channels, s, s):
        raise ShapeError(f"exemplar crop must be resized to {(cfg.in_channels, s, s)}, got {crop.shape}")
    pooled = global_avg_pool(_trunk(crop, params, cfg))
    z = matmul(params["exemplar_proj.weight"], reshape(pooled, (-1, 1)))
    return add(reshape(z, (-1,)), params["exemplar_proj.bias"])


def scale_level(h_z: int, w_z: int, h_x: int, w_x: int, l_total: int) -> int:
    if min(h_z, w_z, h_x, w_x) <= 0:
        raise ValueError("all dimensions must be positive")
    # exact rational arithmetic: floor((h_z/(2 h_x) + w_z/(2 w_x)) * l_total)
    num = (h_z * w_x + w_z * h_x) * l_total
    den = 2 * h_x * w_x
    return min(l_total - 1, num // den)


def apply_scale_embedding(feature: Tensor, level: int, embeddings: Tensor) -> Tensor:
    l_total = embeddings.shape[0]
    if not 0 <= level < l_total:
        raise IndexError(f"scale level {level} outside [0, {l_total})")
    return add(feature, reshape(slice_rows(embeddings, level, level + 1), (-1,)))


def attention_weights(tokens: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Row-stochastic attention matrix over ``tokens`` [n, d] and the value rows."""
    d = tokens.shape[1]

    def project(name: str) -> Tensor:
        # tokens are rows, so x W^T + b == (W x^T)^T + b
        out = matmul(params[f"self_sim.{name}.weight"], transpose(tokens))
        return transpose(add_bias(out, params[f"self_sim.{name}.bias"]))

    q, k, v = project("q"), project("k"), project("v")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return softmax(scores), v


def self_similarity(
    field: FeatureField, exemplars: Sequence[Tensor], params: ModelParams
) -> tuple[FeatureField, list[Tensor]]:
    """Joint self-attention over query positions and exemplar vectors, blended by gamma."""
    if not exemplars:
        raise ValueError("self_similarity needs at least one exemplar vector")
    d, h, w = field.map.shape
    spatial = transpose(reshape(field.map, (d, h * w)))
    tokens = concat([spatial] + [reshape(z, (1, d)) for z in exemplars], axis=0)
    attn, values = attention_weights(tokens, params)
    mixed = add(tokens, scale_by(matmul(attn, values), params["self_sim.gamma"]))
    new_map = reshape(transpose(slice_rows(mixed, 0, h * w)), (d, h, w))
    new_z = [reshape(slice_rows(mixed, h * w + i, h * w + i + 1), (d,)) for i in range(len(exemplars))]
    return FeatureField(new_map, field.stride), new_z
