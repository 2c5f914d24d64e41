"""Seeded generator of toy class-agnostic counting tasks.

Each category is a shape family with its own size, orientation and
intensity ranges. A task is a single-channel image holding 'count'
instances of one category, their dot annotations, up to three exemplar
boxes and (optionally) distractor instances of another category.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .counting import DensityMap
from .tensor_core import ConfigurationError, Tensor

FAMILIES = ("disc", "ring", "bar", "cross", "triangle")
SUPERSAMPLE = 4


class PlacementError(RuntimeError):
    """Instances could not be placed within the retry budget."""


@dataclass(frozen=True)
class CategorySpec:
    category_id: int
    family: str
    size_range: tuple[float, float]  # nominal radius in pixels
    orientation_range: tuple[float, float] = (0.0, math.pi)
    intensity_range: tuple[float, float] = (0.6, 1.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")

    @property
    def base_size(self) -> float:
        return float(sum(self.size_range))  # mean radius * 2


DEFAULT_CATEGORIES: tuple[CategorySpec, ...] = (
    CategorySpec(0, "disc", (1.8, 2.4), intensity_range=(0.7, 1.0), texture_seed=11),
    CategorySpec(1, "ring", (3.0, 3.6), texture_seed=12),
    CategorySpec(2, "bar", (2.8, 3.4), texture_seed=13),
    CategorySpec(3, "cross", (2.6, 3.2), texture_seed=14),
    CategorySpec(4, "triangle", (3.2, 3.8), texture_seed=15),
    CategorySpec(5, "disc", (2.8, 3.4), intensity_range=(0.5, 0.8), texture_seed=16),
    CategorySpec(6, "bar", (2.0, 2.6), orientation_range=(0.0, 0.5), texture_seed=17),
    CategorySpec(7, "ring", (2.4, 3.0), intensity_range=(0.75, 1.0), texture_seed=18),
    CategorySpec(8, "cross", (3.0, 3.6), intensity_range=(0.5, 0.85), texture_seed=19),
    CategorySpec(9, "triangle", (3.6, 4.2), intensity_range=(0.6, 0.95), texture_seed=20),
)


@dataclass
class CountingTask:
    image: np.ndarray  # [c, h, w] in [0, 1]
    dots: list[tuple[int, int]]  # (x, y) pixel centres
    exemplar_boxes: list[tuple[int, int, int, int]]  # (x0, y0, x1, y1), end-exclusive
    category_id: int
    task_id: str = ""

    @property
    def gt_count(self) -> int:
        return len(self.dots)

    def image_tensor(self) -> Tensor:
        return Tensor(self.image)


@dataclass(frozen=True)
class SplitConfig:
    train: tuple[int, ...] = tuple(range(8))
    val: tuple[int, ...] = (8,)
    test: tuple[int, ...] = (9,)
    tasks_per_category: int = 10
    seed: int = 0
    count_range: tuple[int, int] = (3, 30)
    image_size: tuple[int, int] = (64, 64)
    categories: tuple[CategorySpec, ...] = field(default=DEFAULT_CATEGORIES, repr=False)
    distractors: bool = False


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(family: str, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    """Inside-test in the instance's rotated frame (u, v relative to its centre)."""
    if family == "disc":
        return u * u + v * v <= radius * radius
    if family == "ring":
        rr = np.sqrt(u * u + v * v)
        return (rr <= radius) & (rr >= radius - max(1.0, 0.4 * radius))
    half_w = max(0.8, 0.3 * radius)
    if family == "bar":
        return (np.abs(u) <= radius) & (np.abs(v) <= half_w)
    if family == "cross":
        return ((np.abs(u) <= radius) & (np.abs(v) <= half_w)) | ((np.abs(v) <= radius) & (np.abs(u) <= half_w))
    # equilateral triangle with circumradius `radius`
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        ang = math.pi / 2 + 2 * math.pi * k / 3
        inside &= u * math.cos(ang) + v * math.sin(ang) <= radius / 2
    return inside


def _render_instance(canvas: np.ndarray, cx: float, cy: float, family: str, radius: float, theta: float, value: float):
    """Anti-aliased paint of one instance; returns its coverage bounding box (x0, y0, x1, y1)."""
    h, w = canvas.shape
    reach = int(math.ceil(radius)) + 1
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).reshape(-1)
    gx, gy = np.meshgrid(xs - cx, ys - cy)
    c, s = math.cos(theta), math.sin(theta)
    u, v = c * gx + s * gy, -s * gx + c * gy
    inside = _shape_mask(family, u, v, radius).astype(float)
    cover = inside.reshape(y1 - y0, SUPERSAMPLE, x1 - x0, SUPERSAMPLE).mean(axis=(1, 3))
    patch = canvas[y0:y1, x0:x1]
    np.maximum(patch, cover * value, out=patch)
    rows, cols = np.nonzero(cover > 0.25)
    if rows.size == 0:
        rows, cols = np.nonzero(cover > 0)
    return int(x0 + cols.min()), int(y0 + rows.min()), int(x0 + cols.max() + 1), int(y0 + rows.max() + 1)


def _background(rng: np.random.Generator, texture_seed: int, h: int, w: int) -> np.ndarray:
    trng = np.random.default_rng([texture_seed, int(rng.integers(1 << 30))])
    coarse = trng.uniform(0.0, 1.0, (h // 8 + 2, w // 8 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    yi, xi = ys.astype(int), xs.astype(int)
    fy, fx = (ys - yi)[:, None], (xs - xi)[None, :]
    smooth = (
        coarse[np.ix_(yi, xi)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(yi + 1, xi)] * fy * (1 - fx)
        + coarse[np.ix_(yi, xi + 1)] * (1 - fy) * fx
        + coarse[np.ix_(yi + 1, xi + 1)] * fy * fx
    )
    return 0.05 + 0.2 * smooth


def _sample_centres(
    rng, n: int, h: int, w: int, margin: float, min_dist: float, taken: list, retries: int, partial: bool = False
):
    """Rejection-sample ``n`` separated centres; with ``partial`` return however many fit."""
    out = []
    for _ in range(n):
        for _ in range(retries):
            cx, cy = rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)
            if all((cx - ox) ** 2 + (cy - oy) ** 2 >= min_dist**2 for ox, oy, _ in taken + out):
                out.append((cx, cy, min_dist))
                break
        else:
            if partial:
                break
            raise PlacementError(f"could not place {n} instances (min distance {min_dist:.1f}px)")
    return out


def generate_task(
    spec: CategorySpec,
    count_range: tuple[int, int],
    image_size: tuple[int, int] = (64, 64),
    seed=0,
    distractor: CategorySpec | None = None,
    n_exemplars: int = 3,
    retries: int = 500,
    task_id: str = "",
) -> CountingTask:
    lo, hi = count_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid count range {count_range}")
    h, w = image_size
    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))
    margin = max(spec.size_range[1], 4.0) + 1.0
    if 2 * margin >= min(h, w):
        raise PlacementError(f"shapes of radius {spec.size_range[1]:.1f} do not fit a {h}x{w} image")

    for _attempt in range(20):
        centres = _sample_centres(rng, count, h, w, margin, spec.base_size, [], retries)
        extra = []
        if distractor is not None:
            n_d = int(rng.integers(1, max(2, count // 3) + 1))
            sep = max(spec.base_size, distractor.base_size)
            extra = _sample_centres(rng, n_d, h, w, margin, sep, centres, retries, partial=True)

        canvas = _background(rng, spec.texture_seed, h, w)
        dots, boxes = [], []
        for cx, cy, _ in centres:
            radius = rng.uniform(*spec.size_range) * rng.uniform(0.6, 1.4)
            theta = rng.uniform(*spec.orientation_range)
            value = rng.uniform(*spec.intensity_range)
            x0, y0, x1, y1 = _render_instance(canvas, cx, cy, spec.family, radius, theta, value)
            dots.append((int(cx), int(cy)))
            boxes.append((max(0, x0 - 1), max(0, y0 - 1), min(w, x1 + 1), min(h, y1 + 1)))
        for cx, cy, _ in extra:
            radius = rng.uniform(*distractor.size_range)
            _render_instance(
                canvas, cx, cy, distractor.family, radius,
                rng.uniform(*distractor.orientation_range), rng.uniform(*distractor.intensity_range),
            )

        def isolated(k: int) -> bool:
            x0, y0, x1, y1 = boxes[k]
            return sum(x0 <= dx < x1 and y0 <= dy < y1 for dx, dy in dots) == 1

        order = rng.permutation(count)
        chosen = [int(k) for k in order if isolated(int(k))][:n_exemplars]
        if len(chosen) >= min(n_exemplars, count):
            image = np.clip(canvas, 0.0, 1.0)[None]
            return CountingTask(image, dots, [boxes[k] for k in chosen], spec.category_id, task_id)
    raise PlacementError("no placement left enough isolated exemplars")


# ---------------------------------------------------------------------------
# ground truth density


def gaussian_kernel(sigma: float = 1.0, truncate: float = 4.0) -> np.ndarray:
    radius = int(math.ceil(truncate * sigma))
    ax = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def render_density(dots: Sequence[Sequence[int]], shape: tuple[int, int], sigma: float = 1.0) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape
    kern = gaussian_kernel(sigma)
    rad = kern.shape[0] // 2
    out = np.zeros((h, w))
    for x, y in dots:
        x, y = int(x), int(y)
        ky0, ky1 = max(0, rad - y), min(kern.shape[0], rad + h - y)
        kx0, kx1 = max(0, rad - x), min(kern.shape[1], rad + w - x)
        piece = kern[ky0:ky1, kx0:kx1]
        # renormalise so clipped kernels still carry unit mass
        out[y - rad + ky0 : y - rad + ky1, x - rad + kx0 : x - rad + kx1] += piece / piece.sum()
    return out


def render_density_gt(task: CountingTask, sigma: float = 1.0) -> DensityMap:
    return DensityMap(Tensor(render_density(task.dots, task.image.shape[1:], sigma)))


# ---------------------------------------------------------------------------
# splits


def task_seed(seed: int, category_id: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, category_id, index])


def make_splits(cfg: SplitConfig) -> tuple[list[CountingTask], list[CountingTask], list[CountingTask]]:
    ids = [set(cfg.train), set(cfg.val), set(cfg.test)]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise ConfigurationError("train/val/test category sets overlap")
    by_id = {c.category_id: c for c in cfg.categories}
    missing = (ids[0] | ids[1] | ids[2]) - set(by_id)
    if missing:
        raise ConfigurationError(f"unknown category ids {sorted(missing)}")
    all_ids = sorted(by_id)

    def build(cat_ids) -> list[CountingTask]:
        tasks = []
        for cid in sorted(cat_ids):
            for i in range(cfg.tasks_per_category):
                distractor = None
                if cfg.distractors:
                    others = [c for c in all_ids if c != cid]
                    distractor = by_id[others[(cid + i) % len(others)]]
                tasks.append(
                    generate_task(
                        by_id[cid], cfg.count_range, cfg.image_size, task_seed(cfg.seed, cid, i),
                        distractor=distractor, task_id=f"c{cid}_t{i:03d}",
                    )
                )
        return tasks

    return build(cfg.train), build(cfg.val), build(cfg.test)


# ---------------------------------------------------------------------------
# serialisation


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_array(data: str, shape: Sequence[int]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(data), dtype="<f8").reshape(shape).astype(np.float64)


def task_to_json(task: CountingTask) -> dict:
    c, h, w = task.image.shape
    return {
        "task_id": task.task_id,
        "category_id": task.category_id,
        "image": {"h": h, "w": w, "c": c, "data": encode_array(task.image)},
        "dots": [[int(x), int(y)] for x, y in task.dots],
        "exemplar_boxes": [[int(v) for v in b] for b in task.exemplar_boxes],
    }


def task_from_json(obj: dict) -> CountingTask:
    img = obj["image"]
    image = decode_array(img["data"], (img["c"], img["h"], img["w"]))
    return CountingTask(
        image=image,
        dots=[(int(x), int(y)) for x, y in obj["dots"]],
        exemplar_boxes=[tuple(int(v) for v in b) for b in obj["exemplar_boxes"]],
        category_id=int(obj["category_id"]),
        task_id=str(obj.get("task_id", "")),
    )


def save_task(task: CountingTask, path: Path) -> None:
    Path(path).write_text(json.dumps(task_to_json(task), sort_keys=True))


def load_task(path: Path) -> CountingTask:
    return task_from_json(json.loads(Path(path).read_text()))


def density_to_csv(density: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in density)


def density_to_json(density: np.ndarray) -> dict:
    h, w = density.shape
    return {"h": h, "w": w, "c": 1, "data": encode_array(density)}
