"""End-to-end counting model: wiring of representation, matching and counter."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .counting import DensityMap, FusionMode, counter_forward, fuse, fused_channels, init_counter
from .losses import LabelRule, LossWeights, assign_labels, counting_loss, similarity_loss, total_loss
from .matching import aggregate_exemplars, bilinear_similarity, dynamic_similarity, init_metric
from .representation import (
    BackboneConfig,
    FeatureField,
    apply_scale_embedding,
    crop_exemplar,
    extract_exemplar_feature,
    extract_query_features,
    init_representation,
    scale_level,
    self_similarity,
)
from .synthetic_tasks import CountingTask, render_density
from .tensor_core import ConfigurationError, ModelParams, Tensor, mean_leading, stack

TOGGLES = ("SL", "SS", "SE", "DSM")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    counter_width: int = 32
    fusion: FusionMode = FusionMode.XS
    similarity_loss: bool = False  # SL
    self_similarity: bool = False  # SS
    scale_embedding: bool = False  # SE
    dynamic_metric: bool = False  # DSM
    label_rule: LabelRule = LabelRule.AT_LEAST_ONE
    sigma: float = 1.0
    density_scale: float = 100.0

    def __post_init__(self):
        if self.scale_embedding and not self.self_similarity:
            raise ConfigurationError("scale embedding (SE) requires the self-similarity pathway (SS)")
        r = self.backbone.stride
        if r & (r - 1):
            raise ConfigurationError(f"backbone stride must be a power of two, got {r}")

    @property
    def n_upsample(self) -> int:
        return int(round(math.log2(self.backbone.stride)))

    @property
    def toggles(self) -> frozenset[str]:
        flags = (self.similarity_loss, self.self_similarity, self.scale_embedding, self.dynamic_metric)
        return frozenset(name for name, on in zip(TOGGLES, flags) if on)

    def with_toggles(self, toggles) -> "ModelConfig":
        toggles = set(toggles)
        unknown = toggles - set(TOGGLES)
        if unknown:
            raise ConfigurationError(f"unknown toggles {sorted(unknown)}")
        return replace(
            self,
            similarity_loss="SL" in toggles,
            self_similarity="SS" in toggles,
            scale_embedding="SE" in toggles,
            dynamic_metric="DSM" in toggles,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fusion"] = FusionMode(self.fusion).value
        out["label_rule"] = LabelRule(self.label_rule).value
        out["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in out["backbone"].items()}
        return out


BMNET = ModelConfig()
BMNET_PLUS = ModelConfig().with_toggles(TOGGLES)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """All learnable state. Every parameter is created regardless of toggles so
    that checkpoints share a layout and disabled branches simply go unused."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    init_representation(params, cfg.backbone, rng)
    init_metric(params, cfg.backbone.d, rng)
    init_counter(params, fused_channels(cfg.fusion, cfg.backbone.d), cfg.counter_width, cfg.n_upsample, rng)
    return params


@dataclass
class ForwardResult:
    density: DensityMap
    similarity: Tensor  # aggregated map [h_x, w_x]
    per_exemplar: list[Tensor]
    field: FeatureField
    exemplars: list[Tensor]


def exemplar_crops(task: CountingTask, n: int, size: int) -> list[np.ndarray]:
    if not 1 <= n <= len(task.exemplar_boxes):
        raise ValueError(f"task {task.task_id!r} has {len(task.exemplar_boxes)} exemplar boxes, asked for {n}")
    return [crop_exemplar(task.image, box, size) for box in task.exemplar_boxes[:n]]


def forward(params: ModelParams, cfg: ModelConfig, task: CountingTask, n_exemplars: int = 3) -> ForwardResult:
    bb = cfg.backbone
    n = n_exemplars
    field_ = extract_query_features(Tensor(task.image), params, bb)
    _, h_img, w_img = task.image.shape
    zs = []
    for box, crop in zip(task.exemplar_boxes[:n], exemplar_crops(task, n, bb.exemplar_size)):
        z = extract_exemplar_feature(Tensor(crop), params, bb)
        if cfg.scale_embedding:
            x0, y0, x1, y1 = box
            level = scale_level(y1 - y0, x1 - x0, h_img, w_img, bb.l_total)
            z = apply_scale_embedding(z, level, params["scale_embedding"])
        zs.append(z)
    if cfg.self_similarity:
        field_, zs = self_similarity(field_, zs, params)
    metric = dynamic_similarity if cfg.dynamic_metric else bilinear_similarity
    maps = [metric(field_, z, params) for z in zs]
    sim = aggregate_exemplars(maps)
    z_mean = mean_leading(stack(zs)) if cfg.fusion in (FusionMode.XZ, FusionMode.XZS) else None
    density = counter_forward(fuse(field_, z_mean, sim, cfg.fusion), params, cfg.n_upsample, cfg.density_scale)
    return ForwardResult(density, sim, maps, field_, zs)


@dataclass
class TaskLoss:
    total: Tensor
    count: float
    similarity: float


def task_loss(
    params: ModelParams, cfg: ModelConfig, task: CountingTask, alpha: float, n_exemplars: int = 3,
    gt: np.ndarray | None = None,
) -> TaskLoss:
    out = forward(params, cfg, task, n_exemplars)
    if gt is None:
        gt = render_density(task.dots, task.image.shape[1:], cfg.sigma)
    count_l = counting_loss(out.density, Tensor(gt))
    h_x, w_x = out.similarity.shape
    labels = assign_labels(task.dots, h_x, w_x, cfg.backbone.stride, cfg.label_rule)
    sim_l = similarity_loss(out.per_exemplar, labels)
    weight = alpha if cfg.similarity_loss else 0.0
    loss = total_loss(count_l, sim_l, LossWeights(weight))
    return TaskLoss(loss, count_l.item(), sim_l.item())
