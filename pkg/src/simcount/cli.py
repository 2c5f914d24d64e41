"""Command-line entry point: ``simcount {gen,train,eval,ablate,fusion-sweep,verify}``.

Configuration is a flat ``key = value`` file (``--config``) overridden by
flags. Precedence, lowest first: built-in defaults, ``--variant`` preset,
config file, command-line flags. Every command writes ``resolved_config.ini``
into its output directory.

Exit codes: 0 success, 1 usage error, 2 runtime or verification failure.
"""

from __future__ import annotations

import os

# numeric libraries read their thread caps at import time
_THREADS = os.environ.get("SIMCOUNT_THREADS", "1")
if _THREADS.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import configparser  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass, fields  # noqa: E402
from pathlib import Path  # noqa: E402

from . import tensor_core  # noqa: E402
from .counting import FusionMode  # noqa: E402
from .losses import LabelRule  # noqa: E402
from .model import ModelConfig  # noqa: E402
from .representation import BackboneConfig  # noqa: E402
from .synthetic_tasks import (  # noqa: E402
    DEFAULT_CATEGORIES,
    SplitConfig,
    density_to_csv,
    load_task,
    make_splits,
    save_task,
)
from .trainer import (  # noqa: E402
    TrainConfig,
    evaluate,
    history_to_csv,
    load_checkpoint,
    rows_to_csv,
    run_ablation,
    run_fusion_sweep,
    save_checkpoint,
    train,
)

logger = logging.getLogger("simcount")

SPLITS = ("train", "val", "test")
CORRUPT_ENV = "SIMCOUNT_CORRUPT_GRAD"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    out: str = ""
    data: str = ""
    checkpoint: str = ""
    seed: int = 0
    # model
    variant: str = "bmnet"
    d: int = 32
    l_total: int = 20
    gamma_init: float = 0.0
    counter_width: int = 32
    fusion: str = "XS"
    sl: bool = False
    ss: bool = False
    se: bool = False
    dsm: bool = False
    label_rule: str = "at_least_one"
    sigma: float = 1.0
    # training
    alpha: str = "0"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    decay_exclusions: bool = True
    exemplars: int = 3
    # data
    categories: int = 10
    per_cat: int = 10
    count_min: int = 3
    count_max: int = 30
    image_size: int = 64
    distractors: bool = False
    # evaluation
    split: str = "test"
    export_maps: bool = False

    def to_ini(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


VARIANTS = {
    "bmnet": {"sl": False, "ss": False, "se": False, "dsm": False, "alpha": "0"},
    "bmnet+": {"sl": True, "ss": True, "se": True, "dsm": True, "alpha": "auto"},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw) -> object:
    kind = type(getattr(RunConfig(), key))
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def read_config_file(path: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    # flat file: a dummy section header lets configparser do the tokenising
    parser.read_string("[run]\n" + text)
    return dict(parser["run"])


def resolve_config(file_values: dict[str, str], flag_values: dict[str, object]) -> RunConfig:
    explicit: dict[str, object] = {}
    for source in (file_values, flag_values):
        for key, raw in source.items():
            norm = key.strip().lower().replace("-", "_")
            if norm not in _FIELDS:
                raise UsageError(f"unknown config key {key!r}")
            explicit[norm] = _coerce(norm, raw)
    variant = str(explicit.get("variant", RunConfig.variant)).lower()
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    values = {**VARIANTS[variant], **explicit, "variant": variant}
    cfg = RunConfig(**values)
    if cfg.fusion.upper() not in FusionMode.__members__:
        raise UsageError(f"unknown fusion mode {cfg.fusion!r}")
    if cfg.label_rule not in {r.value for r in LabelRule}:
        raise UsageError(f"unknown label rule {cfg.label_rule!r}")
    if cfg.split not in SPLITS:
        raise UsageError(f"unknown split {cfg.split!r}")
    if cfg.alpha != "auto":
        _coerce_alpha(cfg.alpha)
    if not 3 <= cfg.categories <= len(DEFAULT_CATEGORIES):
        raise UsageError(f"categories must be between 3 and {len(DEFAULT_CATEGORIES)}")
    if not 1 <= cfg.exemplars <= 3:
        raise UsageError("exemplars must be 1, 2 or 3")
    return cfg


def _coerce_alpha(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"alpha must be 'auto' or a number, got {text!r}") from None


def model_config(cfg: RunConfig) -> ModelConfig:
    toggles = {name for name, on in (("SL", cfg.sl), ("SS", cfg.ss), ("SE", cfg.se), ("DSM", cfg.dsm)) if on}
    try:
        base = ModelConfig(
            backbone=BackboneConfig(d=cfg.d, l_total=cfg.l_total, gamma_init=cfg.gamma_init),
            counter_width=cfg.counter_width,
            fusion=FusionMode[cfg.fusion.upper()],
            label_rule=LabelRule(cfg.label_rule),
            sigma=cfg.sigma,
        )
        return base.with_toggles(toggles)
    except tensor_core.ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def train_config(cfg: RunConfig) -> TrainConfig:
    alpha = cfg.alpha if cfg.alpha == "auto" else _coerce_alpha(cfg.alpha)
    return TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay,
        alpha=alpha, n_exemplars=cfg.exemplars, seed=cfg.seed, decay_exclusions=cfg.decay_exclusions,
    )


def split_config(cfg: RunConfig) -> SplitConfig:
    n = cfg.categories
    return SplitConfig(
        train=tuple(range(n - 2)), val=(n - 2,), test=(n - 1,), tasks_per_category=cfg.per_cat, seed=cfg.seed,
        count_range=(cfg.count_min, cfg.count_max), image_size=(cfg.image_size, cfg.image_size),
        distractors=cfg.distractors,
    )


def threads() -> int:
    try:
        return max(1, int(_THREADS))
    except ValueError:
        raise UsageError(f"SIMCOUNT_THREADS must be an integer, got {_THREADS!r}") from None


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(cfg.to_ini())
    return out


def _load_splits(cfg: RunConfig):
    """Tasks from ``--data`` (as written by gen) or generated in memory."""
    if not cfg.data:
        return make_splits(split_config(cfg))
    root = Path(cfg.data)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    return tuple([load_task(p) for p in sorted((root / s).glob("*.json"))] for s in SPLITS)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    splits = make_splits(split_config(cfg))
    for name, tasks in zip(SPLITS, splits):
        folder = out / name
        folder.mkdir(exist_ok=True)
        for task in tasks:
            save_task(task, folder / f"{task.task_id}.json")
    print(" ".join(f"{n}={len(t)}" for n, t in zip(SPLITS, splits)))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    mcfg = model_config(cfg)
    train_tasks = _load_splits(cfg)[0]
    if not train_tasks:
        raise UsageError("training split is empty")
    result = train(mcfg, train_tasks, train_config(cfg))
    save_checkpoint(result.params, out / "checkpoint.simc")
    _write_json(out / "model.json", mcfg.to_dict())
    (out / "loss_history.csv").write_text(history_to_csv(result.history))
    last = result.history[-1].count_loss if result.history else float("nan")
    print(f"trained {len(result.history)} steps alpha={result.alpha:.6g} final_count_loss={last:.6g}")
    return 0


def _model_for_checkpoint(cfg: RunConfig, checkpoint: Path) -> ModelConfig:
    sidecar = checkpoint.parent / "model.json"
    if not sidecar.exists():
        return model_config(cfg)
    raw = json.loads(sidecar.read_text())
    bb = raw.pop("backbone")
    backbone = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in bb.items()})
    return ModelConfig(
        backbone=backbone, fusion=FusionMode(raw.pop("fusion")), label_rule=LabelRule(raw.pop("label_rule")), **raw
    )


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    out = _out_dir(cfg)
    ckpt = Path(cfg.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    mcfg = _model_for_checkpoint(cfg, ckpt)
    params = load_checkpoint(ckpt, mcfg)
    tasks = _load_splits(cfg)[SPLITS.index(cfg.split)]
    report = evaluate(params, mcfg, tasks, cfg.exemplars, keep_maps=cfg.export_maps, workers=threads())
    stem = f"report_{cfg.split}_n{cfg.exemplars}"
    if cfg.export_maps:
        maps = out / f"maps_{cfg.split}_n{cfg.exemplars}"
        maps.mkdir(exist_ok=True)
        for rec in report.records:
            (maps / f"{rec['task_id']}_density.csv").write_text(density_to_csv(rec.pop("density")))
            (maps / f"{rec['task_id']}_similarity.csv").write_text(density_to_csv(rec.pop("similarity")))
    _write_json(out / f"{stem}.json", {**report.to_json(), "split": cfg.split, "n_exemplars": cfg.exemplars})
    (out / f"{stem}.csv").write_text(report.records_csv())
    print(f"{cfg.split} n={cfg.exemplars} MAE={report.mae:.4f} MSE={report.mse:.4f}")
    return 0


def _write_rows(out: Path, stem: str, rows) -> None:
    (out / f"{stem}.csv").write_text(rows_to_csv(rows))
    _write_json(out / f"{stem}.json", [r.flat() for r in rows])
    for r in rows:
        print(f"{r.name}: val MAE={r.val.mae:.4f} MSE={r.val.mse:.4f} test MAE={r.test.mae:.4f} MSE={r.test.mse:.4f}")


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    tc = train_config(cfg)
    if tc.alpha != "auto" and tc.alpha == 0.0:
        # SL rows are meaningless without a similarity weight
        tc = dataclasses.replace(tc, alpha="auto")
    rows = run_ablation(_load_splits(cfg), model_config(cfg), tc, workers=threads())
    _write_rows(out, "ablation", rows)
    return 0


def cmd_fusion_sweep(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rows = run_fusion_sweep(_load_splits(cfg), model_config(cfg), train_config(cfg), workers=threads())
    _write_rows(out, "fusion_sweep", rows)
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_checks

    corrupt = os.environ.get(CORRUPT_ENV, "")
    if corrupt:
        tensor_core._CORRUPTED_OPS.add(corrupt)
    try:
        results, seconds = run_checks(cfg.seed)
    finally:
        tensor_core._CORRUPTED_OPS.discard(corrupt)
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    if failed:
        lines.append("FAILED: " + ", ".join(failed))
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if cfg.out:
        _out_dir(cfg).joinpath("verify_report.txt").write_text(report)
    return 2 if failed else 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "fusion-sweep": cmd_fusion_sweep,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simcount", description="Exemplar-based counting on synthetic tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type in ("bool", bool):
                p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
            else:
                p.add_argument(flag, dest=f.name, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        flags = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            flags[key.strip()] = value.strip()
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, flags)
        threads()
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"simcount: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures are reported, not raised
        print(f"simcount: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
