"""Self-checks behind ``simcount verify``: gradient checks, loss oracle and identity reductions."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .counting import counter_forward, init_counter
from .losses import POSITIVE, NEGATIVE, assign_labels, counting_loss, similarity_loss, similarity_loss_direct, snr_loss
from .matching import bilinear_similarity, dynamic_similarity, init_metric
from .representation import BackboneConfig, FeatureField, init_representation, scale_level, self_similarity
from .tensor_core import (
    ModelParams,
    Tensor,
    bilinear_upsample,
    conv2d,
    global_avg_pool,
    grad_check,
    hadamard,
    matmul,
    relu,
    softmax,
    tanh,
)

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    kind: str  # "grad", "oracle" or "identity"
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.kind:8s} {self.name:18s} max_err={self.value:.3e} tol={self.tolerance:.0e}"


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _metric_params(d: int, rng) -> ModelParams:
    p = ModelParams()
    init_metric(p, d, rng)
    p["metric.b_x"].data[...] = rng.standard_normal(d) * 0.3
    p["metric.b_z"].data[...] = rng.standard_normal(d) * 0.3
    return p


def _grad_cases(rng) -> dict[str, Callable[[], float]]:
    d = 4
    metric = _metric_params(d, rng)
    metric_names = ["metric.P", "metric.Q", "metric.b_x", "metric.b_z"]
    attn_names = ["metric.attn1.weight", "metric.attn1.bias", "metric.attn2.weight", "metric.attn2.bias"]

    rep = ModelParams()
    init_representation(rep, BackboneConfig(widths=(2, 2, 2), d=d, exemplar_size=8, gamma_init=0.7), rng)

    counter = ModelParams()
    init_counter(counter, 3, 3, 1, rng)
    counter["counter.out.bias"].data[...] = 0.5  # keep the final relu active

    labels = assign_labels([(1, 1), (6, 9), (13, 2)], 4, 4, 4)

    def attention(fmap, z0, wq, gamma):
        f, zs = self_similarity(FeatureField(fmap, 4), [z0, Tensor(np.ones(d))], rep)
        return f.map

    away = rng.uniform(0.1, 2.0, 12) * rng.choice([-1, 1], 12)
    return {
        "matmul": lambda: grad_check(matmul, [_leaf(rng, 3, 4), _leaf(rng, 4, 2)]),
        "conv2d": lambda: grad_check(
            lambda x, k, b: conv2d(x, k, b, 2, (1, 1, 0, 2)), [_leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)]
        ),
        "pool": lambda: grad_check(global_avg_pool, _leaf(rng, 3, 4, 5)),
        "upsample": lambda: grad_check(lambda x: bilinear_upsample(x, 2), _leaf(rng, 2, 3, 4)),
        "relu": lambda: grad_check(relu, Tensor(away, requires_grad=True)),
        "tanh": lambda: grad_check(tanh, _leaf(rng, 10)),
        "hadamard": lambda: grad_check(hadamard, [_leaf(rng, 5), _leaf(rng, 5)]),
        "softmax": lambda: grad_check(softmax, _leaf(rng, 3, 5)),
        "attention": lambda: grad_check(
            attention, [_leaf(rng, d, 2, 2), _leaf(rng, d), rep["self_sim.q.weight"], rep["self_sim.gamma"]]
        ),
        "bilinear_metric": lambda: grad_check(
            lambda f, z, *_: bilinear_similarity(FeatureField(f, 4), z, metric),
            [_leaf(rng, d, 2, 3), _leaf(rng, d)] + [metric[n] for n in metric_names],
        ),
        "dynamic_metric": lambda: grad_check(
            lambda f, z, *_: dynamic_similarity(FeatureField(f, 4), z, metric),
            [_leaf(rng, d, 2, 3), _leaf(rng, d)] + [metric[n] for n in metric_names + attn_names],
        ),
        "counter": lambda: grad_check(
            lambda x, *_: counter_forward(x, counter, 1, output_scale=1.0).map,
            [_leaf(rng, 3, 3, 3)] + [counter[n] for n in ("counter.conv0.weight", "counter.up0.weight", "counter.out.weight")],
        ),
        "counting_loss": lambda: grad_check(
            lambda p: counting_loss(p, Tensor(np.full((4, 4), 0.1))), _leaf(rng, 4, 4)
        ),
        "similarity_loss": lambda: grad_check(lambda s: similarity_loss(s, labels), _leaf(rng, 4, 4)),
    }


def _identity_reduction(rng, trials: int = 50) -> float:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 9))
        p = ModelParams()
        init_metric(p, d, rng)
        p["metric.P"].data[...] = np.eye(d)
        p["metric.Q"].data[...] = np.eye(d)
        fmap = rng.standard_normal((d, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        z = rng.standard_normal(d)
        got = bilinear_similarity(FeatureField(Tensor(fmap), 4), Tensor(z), p).data
        worst = max(worst, float(np.max(np.abs(got - np.einsum("dhw,d->hw", fmap, z)))))
    return worst


def _loss_oracle(rng, trials: int = 100) -> float:
    worst = 0.0
    for _ in range(trials):
        h, w = rng.integers(2, 7, size=2)
        scores = rng.uniform(-10, 10, (h, w))
        labels = rng.choice([POSITIVE, NEGATIVE, -1], size=(h, w))
        labels.flat[0], labels.flat[1] = POSITIVE, NEGATIVE
        pos, neg = labels == POSITIVE, labels == NEGATIVE
        got = snr_loss(Tensor(scores), pos, neg).item()
        worst = max(worst, abs(got - similarity_loss_direct(scores, pos, neg)))
    return worst


def _ln2_case() -> float:
    s = Tensor([0.0, 0.0])
    return abs(snr_loss(s, np.array([True, False]), np.array([False, True])).item() - math.log(2))


def _scale_table() -> float:
    table = [((32, 32, 64, 64), 10), ((64, 64, 64, 64), 19), ((1, 1, 100, 100), 0)]
    return float(sum(abs(scale_level(*args, 20) - want) for args, want in table))


def run_checks(seed: int = 0) -> tuple[list[CheckResult], float]:
    """Run every check; returns the results and the wall time in seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = [CheckResult(name, "grad", float(fn()), GRAD_TOL) for name, fn in _grad_cases(rng).items()]
    results.append(CheckResult("bilinear_identity", "identity", _identity_reduction(rng), 1e-12))
    results.append(CheckResult("similarity_oracle", "oracle", _loss_oracle(rng), 1e-10))
    results.append(CheckResult("similarity_ln2", "oracle", _ln2_case(), 1e-12))
    results.append(CheckResult("scale_level_table", "identity", _scale_table(), 0.0))
    return results, time.perf_counter() - start
