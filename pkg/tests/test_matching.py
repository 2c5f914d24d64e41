import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simcount.matching import (
    aggregate_exemplars,
    bilinear_similarity,
    channel_attention,
    dynamic_similarity,
    init_metric,
)
from simcount.losses import assign_labels, similarity_loss
from simcount.representation import FeatureField
from simcount.tensor_core import ModelParams, ShapeError, Tensor, backward, grad_check


def metric_params(d, seed=0, P=None, Q=None, b_x=None, b_z=None):
    params = ModelParams()
    init_metric(params, d, np.random.default_rng(seed))
    for name, val in (("P", P), ("Q", Q), ("b_x", b_x), ("b_z", b_z)):
        if val is not None:
            params[f"metric.{name}"].data[...] = val
    return params


def field_of(vec):
    return FeatureField(Tensor(np.asarray(vec, dtype=float).reshape(-1, 1, 1)), 4)


def test_identity_reduction_inner_product():
    p = metric_params(2, P=np.eye(2), Q=np.eye(2), b_x=0, b_z=0)
    assert bilinear_similarity(field_of([1, 2]), Tensor([3.0, 4.0]), p).data[0, 0] == 11.0


def test_swapped_P():
    p = metric_params(2, P=[[0, 1], [1, 0]], Q=np.eye(2), b_x=0, b_z=0)
    assert bilinear_similarity(field_of([1, 0]), Tensor([0.0, 1.0]), p).data[0, 0] == 1.0


def test_query_bias():
    p = metric_params(2, P=np.eye(2), Q=np.eye(2), b_x=[1, 1], b_z=0)
    assert bilinear_similarity(field_of([0, 0]), Tensor([1.0, 1.0]), p).data[0, 0] == 2.0


def test_dimension_mismatch():
    p = metric_params(4)
    with pytest.raises(ShapeError):
        bilinear_similarity(field_of([1.0, 2.0]), Tensor(np.ones(4)), p)


@pytest.mark.parametrize("seed", range(10))
def test_identity_reduction_random_maps(seed):
    rng = np.random.default_rng(seed)
    d = 6
    p = metric_params(d, P=np.eye(d), Q=np.eye(d), b_x=0, b_z=0)
    fmap = rng.standard_normal((d, 3, 5))
    z = rng.standard_normal(d)
    S = bilinear_similarity(FeatureField(Tensor(fmap), 4), Tensor(z), p).data
    np.testing.assert_allclose(S, np.einsum("dhw,d->hw", fmap, z), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_exemplar_without_bias(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    d = 4
    p = metric_params(d, seed, b_z=0)
    p["metric.b_x"].data[...] = rng.standard_normal(d)
    field = FeatureField(Tensor(rng.standard_normal((d, 2, 3))), 4)
    z1, z2 = rng.standard_normal(d), rng.standard_normal(d)
    lhs = bilinear_similarity(field, Tensor(alpha * z1 + beta * z2), p).data
    rhs = alpha * bilinear_similarity(field, Tensor(z1), p).data + beta * bilinear_similarity(field, Tensor(z2), p).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_channel_attention_zero_network():
    p = metric_params(4)
    for name in ("attn1.weight", "attn1.bias", "attn2.weight", "attn2.bias"):
        p[f"metric.{name}"].data[...] = 0
    np.testing.assert_array_equal(channel_attention(Tensor(np.ones(4)), p).data, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_channel_attention_bounded(seed, magnitude):
    rng = np.random.default_rng(seed)
    p = metric_params(8, seed)
    a = channel_attention(Tensor(rng.standard_normal(8) * magnitude), p).data
    assert np.all(np.abs(a) <= 1)
    assert np.all(np.abs(a) < 1) or magnitude > 10  # tanh saturates to 1.0 in floating point only for huge inputs


def test_channel_attention_deterministic():
    p = metric_params(4)
    z = Tensor([0.1, -0.3, 0.5, 2.0])
    np.testing.assert_array_equal(channel_attention(z, p).data, channel_attention(Tensor(z.data.copy()), p).data)


def test_dynamic_with_unit_attention_equals_bilinear():
    rng = np.random.default_rng(3)
    p = metric_params(4, 3)
    field = FeatureField(Tensor(rng.standard_normal((4, 3, 3))), 4)
    z = Tensor(rng.standard_normal(4))
    np.testing.assert_allclose(
        dynamic_similarity(field, z, p, attention=Tensor(np.ones(4))).data, bilinear_similarity(field, z, p).data, atol=1e-15
    )
    np.testing.assert_array_equal(dynamic_similarity(field, z, p, attention=Tensor(np.zeros(4))).data, 0)


def test_dynamic_hand_value():
    p = metric_params(2, P=np.eye(2), Q=np.eye(2), b_x=0, b_z=0)
    out = dynamic_similarity(field_of([1, 1]), Tensor([1.0, 1.0]), p, attention=Tensor([1.0, -1.0]))
    assert out.data[0, 0] == 0.0


def test_aggregate_examples():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(aggregate_exemplars([Tensor(m)] * 3).data, m)
    np.testing.assert_array_equal(aggregate_exemplars([Tensor(np.zeros((1, 1))), Tensor(np.full((1, 1), 2.0))]).data, [[1.0]])
    np.testing.assert_array_equal(aggregate_exemplars(Tensor(m[None])).data, m)
    with pytest.raises(ValueError):
        aggregate_exemplars([])


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    maps = [Tensor(rng.standard_normal((3, 3))) for _ in range(4)]
    a = aggregate_exemplars(maps).data
    b = aggregate_exemplars(maps[::-1]).data
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(a, np.mean([m.data for m in maps], axis=0), atol=1e-15)


def test_metric_grad_checks():
    rng = np.random.default_rng(5)
    d = 4
    p = metric_params(d, 5)
    p["metric.b_x"].data[...] = rng.standard_normal(d) * 0.3
    p["metric.b_z"].data[...] = rng.standard_normal(d) * 0.3
    fmap = Tensor(rng.standard_normal((d, 2, 3)), requires_grad=True)
    z = Tensor(rng.standard_normal(d), requires_grad=True)
    names = ["metric.P", "metric.Q", "metric.b_x", "metric.b_z"]
    extra = ["metric.attn1.weight", "metric.attn1.bias", "metric.attn2.weight", "metric.attn2.bias"]

    def bil(fmap, z, *_):
        return bilinear_similarity(FeatureField(fmap, 4), z, p)

    def dyn(fmap, z, *_):
        return dynamic_similarity(FeatureField(fmap, 4), z, p)

    assert grad_check(bil, [fmap, z] + [p[n] for n in names]) < 1e-4
    assert grad_check(dyn, [fmap, z] + [p[n] for n in names + extra]) < 1e-4


def test_no_dead_metric_parameters():
    rng = np.random.default_rng(9)
    d = 6
    p = metric_params(d, 9)
    field = FeatureField(Tensor(rng.standard_normal((d, 4, 4))), 4)
    z = Tensor(rng.standard_normal(d))
    labels = assign_labels([(1, 1), (9, 5)], 4, 4, 4)
    loss = similarity_loss(dynamic_similarity(field, z, p), labels)
    backward(loss)
    for prm in p:
        assert prm.grad is not None and np.any(prm.grad != 0), prm.name
