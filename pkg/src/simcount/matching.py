"""Learnable bilinear and dynamic similarity metrics."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .representation import FeatureField
from .tensor_core import (
    ModelParams,
    ShapeError,
    Tensor,
    add,
    add_bias,
    hadamard,
    matmul,
    mean_leading,
    relu,
    reshape,
    stack,
    tanh,
)


def init_metric(params: ModelParams, d: int, rng: np.random.Generator, noise: float = 0.01) -> None:
    params.new("metric.P", np.eye(d) + rng.normal(0.0, noise, (d, d)))
    params.new("metric.Q", np.eye(d) + rng.normal(0.0, noise, (d, d)))
    params.new("metric.b_x", np.zeros(d), decay_enabled=False)
    params.new("metric.b_z", np.zeros(d), decay_enabled=False)
    hidden = d // 2
    params.new("metric.attn1.weight", rng.normal(0.0, math.sqrt(2.0 / d), (hidden, d)))
    params.new("metric.attn1.bias", np.zeros(hidden), decay_enabled=False)
    params.new("metric.attn2.weight", rng.normal(0.0, math.sqrt(1.0 / hidden), (d, hidden)))
    params.new("metric.attn2.bias", np.zeros(d), decay_enabled=False)


def _query_branch(field: FeatureField, params: ModelParams) -> Tensor:
    """P x_ij + b_x for every position, as a [d, h*w] matrix."""
    d, h, w = field.map.shape
    P = params["metric.P"]
    if P.shape != (d, d):
        raise ShapeError(f"feature field has {d} channels but P is {P.shape}")
    return add_bias(matmul(P, reshape(field.map, (d, h * w))), params["metric.b_x"])


def exemplar_branch(z: Tensor, params: ModelParams) -> Tensor:
    """Q z + b_z as a [d] vector."""
    Q = params["metric.Q"]
    if z.shape != (Q.shape[1],):
        raise ShapeError(f"exemplar vector {z.shape} does not match Q {Q.shape}")
    return add(reshape(matmul(Q, reshape(z, (-1, 1))), (-1,)), params["metric.b_z"])


def _score(field: FeatureField, zq: Tensor, params: ModelParams) -> Tensor:
    _, h, w = field.map.shape
    px = _query_branch(field, params)
    return reshape(matmul(reshape(zq, (1, -1)), px), (h, w))


def bilinear_similarity(field: FeatureField, z: Tensor, params: ModelParams) -> Tensor:
    """S_ij = (P x_ij + b_x)^T (Q z + b_z)."""
    return _score(field, exemplar_branch(z, params), params)


def channel_attention(z: Tensor, params: ModelParams) -> Tensor:
    u = reshape(exemplar_branch(z, params), (-1, 1))
    hidden = relu(add_bias(matmul(params["metric.attn1.weight"], u), params["metric.attn1.bias"]))
    a = tanh(add_bias(matmul(params["metric.attn2.weight"], hidden), params["metric.attn2.bias"]))
    return reshape(a, (-1,))


def dynamic_similarity(
    field: FeatureField, z: Tensor, params: ModelParams, attention: Tensor | None = None
) -> Tensor:
    """S_ij = (P x_ij + b_x)^T (a * (Q z + b_z)); ``attention`` overrides ``a`` when given."""
    a = channel_attention(z, params) if attention is None else attention
    return _score(field, hadamard(a, exemplar_branch(z, params)), params)


def aggregate_exemplars(per_exemplar: Tensor | Sequence[Tensor]) -> Tensor:
    if not isinstance(per_exemplar, Tensor):
        if not per_exemplar:
            raise ValueError("aggregate_exemplars needs at least one map")
        per_exemplar = stack(per_exemplar)
    if per_exemplar.shape[0] == 0:
        raise ValueError("aggregate_exemplars needs at least one map")
    return mean_leading(per_exemplar)
