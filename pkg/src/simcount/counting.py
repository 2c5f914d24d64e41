"""Counter head: feature fusion and density-map regression."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .representation import FeatureField
from .tensor_core import (
    ModelParams,
    Tensor,
    bilinear_upsample,
    broadcast_channels,
    concat,
    conv2d,
    relu,
    reshape,
    scale,
    total,
)


class FusionMode(str, enum.Enum):
    S_ONLY = "S_ONLY"
    XZ = "XZ"
    XZS = "XZS"
    XS = "XS"


def fused_channels(mode: FusionMode, d: int) -> int:
    return {FusionMode.S_ONLY: 1, FusionMode.XZ: 2 * d, FusionMode.XZS: 2 * d + 1, FusionMode.XS: d + 1}[
        FusionMode(mode)
    ]


@dataclass
class DensityMap:
    map: Tensor

    @property
    def predicted_count(self) -> float:
        return float(self.map.data.sum())


def fuse(field: FeatureField, z: Tensor | None, similarity: Tensor, mode: FusionMode = FusionMode.XS) -> Tensor:
    """Channel-wise concatenation of the counter inputs selected by ``mode``."""
    mode = FusionMode(mode)
    d, h, w = field.map.shape
    s = reshape(similarity, (1, h, w))
    if mode is FusionMode.S_ONLY:
        return s
    if mode is FusionMode.XS:
        return concat([field.map, s])
    tiled = broadcast_channels(z, h, w)
    if mode is FusionMode.XZ:
        return concat([field.map, tiled])
    return concat([field.map, tiled, s])


def init_counter(params: ModelParams, in_channels: int, width: int, n_upsample: int, rng) -> None:
    def conv(name, c_out, c_in, k):
        std = math.sqrt(2.0 / (c_in * k * k))
        params.new(f"{name}.weight", rng.normal(0.0, std, (c_out, c_in, k, k)))
        params.new(f"{name}.bias", np.zeros(c_out), decay_enabled=False)

    conv("counter.conv0", width, in_channels, 3)
    conv("counter.conv1", width, width, 3)
    for i in range(n_upsample):
        conv(f"counter.up{i}", width, width, 3)
    conv("counter.out", 1, width, 1)


def counter_forward(fused: Tensor, params: ModelParams, n_upsample: int, output_scale: float = 100.0) -> DensityMap:
    """Two conv stages, ``n_upsample`` x2 upsample+conv stages, then a 1x1 conv and relu.

    The raw head output is divided by ``output_scale`` so that parameter
    updates of optimiser-step size move the density in small increments.
    """
    x = relu(conv2d(fused, params["counter.conv0.weight"], params["counter.conv0.bias"], padding=1))
    x = relu(conv2d(x, params["counter.conv1.weight"], params["counter.conv1.bias"], padding=1))
    for i in range(n_upsample):
        x = bilinear_upsample(x, 2)
        x = relu(conv2d(x, params[f"counter.up{i}.weight"], params[f"counter.up{i}.bias"], padding=1))
    x = relu(conv2d(x, params["counter.out.weight"], params["counter.out.bias"]))
    if output_scale != 1.0:
        x = scale(x, 1.0 / output_scale)
    _, h, w = x.shape
    return DensityMap(reshape(x, (h, w)))


def integrate(density: DensityMap | Tensor) -> float:
    m = density.map if isinstance(density, DensityMap) else density
    return float(total(m).item())
