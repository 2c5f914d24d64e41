"""AdamW training loop, count evaluation and the experiment harnesses."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .counting import FusionMode
from .losses import assign_labels
from .model import TOGGLES, ModelConfig, forward, init_params, task_loss
from .synthetic_tasks import CountingTask, render_density
from .tensor_core import ModelParams, backward

logger = logging.getLogger(__name__)


class MissingGradientError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, batch_id: int, task_ids: Sequence[str]):
        super().__init__(message)
        self.batch_id = batch_id
        self.task_ids = list(task_ids)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    # when False every parameter is decayed, ignoring decay_enabled flags
    decay_exclusions: bool = True
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optim_step(params: ModelParams, state: OptimState, skip_missing: bool = False) -> None:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    With ``skip_missing`` parameters that received no gradient (branches
    switched off in the current configuration) are left untouched.
    """
    for p in params:
        if p.grad is None and not skip_missing:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and (p.decay_enabled or not state.decay_exclusions):
            update = update + state.lr * state.weight_decay * p.data
        p.data -= update


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    alpha: float | str = "auto"
    n_exemplars: int = 3
    seed: int = 0
    decay_exclusions: bool = True


@dataclass
class StepRecord:
    step: int
    epoch: int
    batch: int
    count_loss: float
    sim_loss: float
    total_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[StepRecord]
    alpha: float


def pad_batch(images: Sequence[np.ndarray]) -> np.ndarray:
    """Zero-pad [c, h, w] images at the bottom/right to a common size and stack them."""
    c = images[0].shape[0]
    h = max(im.shape[1] for im in images)
    w = max(im.shape[2] for im in images)
    out = np.zeros((len(images), c, h, w))
    for i, im in enumerate(images):
        out[i, :, : im.shape[1], : im.shape[2]] = im
    return out


def collate(tasks: Sequence[CountingTask], sigma: float = 1.0) -> list[tuple[CountingTask, np.ndarray]]:
    """Pad a batch to one size; boxes and dots keep their coordinates (padding is bottom/right)."""
    images = pad_batch([t.image for t in tasks])
    out = []
    for t, img in zip(tasks, images):
        padded = replace(t, image=img)
        out.append((padded, render_density(t.dots, img.shape[1:], sigma)))
    return out


def calibrate_alpha(params: ModelParams, cfg: ModelConfig, batch: Sequence[CountingTask], n_exemplars: int) -> float:
    """Weight that puts alpha * L_sim on the scale of L_count for ``batch``."""
    counts, sims = [], []
    for task in batch:
        loss = task_loss(params, cfg, task, 0.0, n_exemplars)
        counts.append(loss.count)
        sims.append(loss.similarity)
    sim = float(np.mean(sims))
    return float(np.mean(counts)) / sim if sim > 0 else 0.0


def train(
    cfg: ModelConfig, tasks: Sequence[CountingTask], tc: TrainConfig = TrainConfig(), params: ModelParams | None = None
) -> TrainResult:
    if not tasks:
        raise ValueError("training split is empty")
    params = init_params(cfg, tc.seed) if params is None else params
    rng = np.random.default_rng(tc.seed + 1)
    state = OptimState(lr=tc.lr, weight_decay=tc.weight_decay, decay_exclusions=tc.decay_exclusions)
    history: list[StepRecord] = []
    alpha = 0.0
    if cfg.similarity_loss:
        if tc.alpha == "auto":
            first = [tasks[i] for i in rng.permutation(len(tasks))[: tc.batch_size]]
            alpha = calibrate_alpha(params, cfg, first, tc.n_exemplars)
        else:
            alpha = float(tc.alpha)
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(tasks))
        for b, start in enumerate(range(0, len(tasks), tc.batch_size)):
            batch = [tasks[i] for i in order[start : start + tc.batch_size]]
            params.zero_grad()
            c_sum = s_sum = t_sum = 0.0
            for task, gt in collate(batch, cfg.sigma):
                loss = task_loss(params, cfg, task, alpha, tc.n_exemplars, gt=gt)
                # batch mean of per-task losses
                scaled = loss.total * (1.0 / len(batch))
                backward(scaled)
                c_sum += loss.count
                s_sum += loss.similarity
                t_sum += loss.total.item()
            n = len(batch)
            rec = StepRecord(step, epoch, b, c_sum / n, s_sum / n, t_sum / n)
            if not np.isfinite([rec.count_loss, rec.sim_loss, rec.total_loss]).all():
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (batch {b} of epoch {epoch})", step, [t.task_id for t in batch]
                )
            optim_step(params, state, skip_missing=True)
            for p in params:
                if not np.isfinite(p.data).all():
                    raise TrainingDiverged(f"parameter {p.name} became non-finite at step {step}", step, [t.task_id for t in batch])
            history.append(rec)
            step += 1
    params.zero_grad()
    return TrainResult(params, history, alpha)


def train_steps(
    cfg: ModelConfig, task: CountingTask, steps: int, tc: TrainConfig = TrainConfig()
) -> TrainResult:
    """Repeatedly fit a single task; used for overfitting checks."""
    return train(cfg, [task], replace(tc, epochs=steps, batch_size=1))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mae: float
    mse: float
    records: list[dict]
    fingerprint: str = ""

    def to_json(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "fingerprint": self.fingerprint, "per_task": self.records}

    def records_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["task_id", "category_id", "gt_count", "predicted_count"], lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: r[k] for k in writer.fieldnames})
        return buf.getvalue()


def count_errors(pairs: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """(MAE, root-mean-squared error) of (predicted, gt) pairs."""
    diffs = np.array([p - g for p, g in pairs], dtype=float)
    if diffs.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(np.abs(diffs))), float(np.sqrt(np.mean(diffs**2)))


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    tasks: Sequence[CountingTask],
    n_exemplars: int = 3,
    keep_maps: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Score ``tasks`` with the first ``n_exemplars`` boxes of each.

    Forward passes only read ``params``, so they may fan out over ``workers``
    threads; records come back ordered by task id either way.
    """
    if not tasks:
        raise ValueError("cannot evaluate on an empty task list")

    def score(task: CountingTask) -> dict:
        out = forward(params, cfg, task, n_exemplars)
        rec = {
            "task_id": task.task_id,
            "category_id": task.category_id,
            "gt_count": task.gt_count,
            "predicted_count": out.density.predicted_count,
        }
        if keep_maps:
            rec["density"] = out.density.map.data
            rec["similarity"] = out.similarity.data
        return rec

    ordered = sorted(tasks, key=lambda t: t.task_id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(score, ordered))
    else:
        records = [score(t) for t in ordered]
    mae, mse = count_errors((r["predicted_count"], r["gt_count"]) for r in records)
    fp = fingerprint({"model": cfg.to_dict(), "n_exemplars": n_exemplars, "tasks": [r["task_id"] for r in records]})
    return EvalReport(mae, mse, records, fp)


def mean_count_baseline(train_tasks: Sequence[CountingTask], tasks: Sequence[CountingTask]) -> float:
    """MAE of always predicting the mean training count."""
    mean = float(np.mean([t.gt_count for t in train_tasks]))
    return count_errors((mean, t.gt_count) for t in tasks)[0]


def ranking_auc(scores: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    pos = np.asarray(scores)[positive]
    neg = np.asarray(scores)[negative]
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def similarity_auc(params: ModelParams, cfg: ModelConfig, tasks: Sequence[CountingTask], n_exemplars: int = 3) -> float:
    """Mean per-task AUC of the aggregated similarity map against block labels."""
    aucs = []
    for task in tasks:
        out = forward(params, cfg, task, n_exemplars)
        h_x, w_x = out.similarity.shape
        labels = assign_labels(task.dots, h_x, w_x, cfg.backbone.stride, cfg.label_rule)
        auc = ranking_auc(out.similarity.data, labels.positive, labels.negative)
        if np.isfinite(auc):
            aucs.append(auc)
    return float(np.mean(aucs))


# ---------------------------------------------------------------------------
# experiment harnesses

ABLATION_ROWS: dict[str, frozenset[str]] = {
    "B1": frozenset(),
    "B2": frozenset({"SL"}),
    "B3": frozenset({"SL", "SS"}),
    "B4": frozenset({"SL", "SS", "SE"}),
    "B5": frozenset(TOGGLES),
}


@dataclass
class ExperimentRow:
    name: str
    settings: dict
    val: EvalReport
    test: EvalReport

    def flat(self) -> dict:
        out = {"row": self.name, **self.settings}
        out.update(val_mae=self.val.mae, val_mse=self.val.mse, test_mae=self.test.mae, test_mse=self.test.mse)
        return out


def _fit_and_score(cfg, splits, tc, name, settings, workers=1) -> ExperimentRow:
    train_tasks, val_tasks, test_tasks = splits
    result = train(cfg, train_tasks, tc)
    return ExperimentRow(
        name,
        settings,
        evaluate(result.params, cfg, val_tasks, tc.n_exemplars, workers=workers),
        evaluate(result.params, cfg, test_tasks, tc.n_exemplars, workers=workers),
    )


def run_ablation(
    splits,
    base_cfg: ModelConfig = ModelConfig(),
    tc: TrainConfig = TrainConfig(),
    rows: dict | None = None,
    workers: int = 1,
) -> list[ExperimentRow]:
    rows = ABLATION_ROWS if rows is None else rows
    out = []
    for name, toggles in rows.items():
        cfg = base_cfg.with_toggles(toggles)
        settings = {t: (t in toggles) for t in TOGGLES}
        out.append(_fit_and_score(cfg, splits, tc, name, settings, workers))
        logger.info("ablation %s done: val MAE %.3f", name, out[-1].val.mae)
    return out


def run_fusion_sweep(
    splits, base_cfg: ModelConfig = ModelConfig(), tc: TrainConfig = TrainConfig(), workers: int = 1
) -> list[ExperimentRow]:
    out = []
    for mode in (FusionMode.S_ONLY, FusionMode.XZ, FusionMode.XZS, FusionMode.XS):
        cfg = replace(base_cfg, fusion=mode)
        out.append(_fit_and_score(cfg, splits, tc, mode.value, {"fusion": mode.value}, workers))
    return out


def rows_to_csv(rows: Sequence[ExperimentRow]) -> str:
    flat = [r.flat() for r in rows]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(flat[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(flat)
    return buf.getvalue()


def history_to_csv(history: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "batch", "count_loss", "sim_loss", "total_loss"])
    for r in history:
        writer.writerow([r.step, r.epoch, r.batch, repr(r.count_loss), repr(r.sim_loss), repr(r.total_loss)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints: b"SIMC", u32 version, u32 record count, then per parameter
# u32 name length, utf-8 name, u32 ndim, u32 dims..., little-endian f64 data

MAGIC = b"SIMC"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path: Path) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out


def load_checkpoint(path: Path, cfg: ModelConfig) -> ModelParams:
    params = init_params(cfg, 0)
    params.load(read_checkpoint(path))
    return params
