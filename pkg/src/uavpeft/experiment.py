"""End-to-end runs: single train/test/validation/inference split and k-fold CV.

Run directories are self-describing: ``config.txt`` echoes the resolved
config, ``metrics.jsonl`` holds one row per (epoch, split), and
``summary.json`` carries the numbers a report needs.
"""

from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, replace
from .data import (
    ManifestEntry,
    Split,
    TrainingItem,
    check_no_leakage,
    class_names,
    featurize,
    inflate,
    kfold_plan,
    parse_manifest,
    stratified_split,
)
from .models import Module, build_model, load_checkpoint, save_checkpoint
from .peft import StrategyError, adapter_parameters, apply_strategy, param_stats
from .train import ArrayDataset, JsonlWriter, confusion_matrix, fit, macro_f1, predict

__all__ = [
    "FoldSummary",
    "format_cell",
    "build_adapted_model",
    "run_single",
    "run_kfold",
    "write_confusion",
    "params_table",
    "render_params_table",
    "consolidate",
]


def format_cell(values: list[float]) -> str:
    """Table-style "MM.MM% ± S.SS%" from fractions, sample (n-1) std."""
    mean = 100 * statistics.fmean(values)
    std = 100 * statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{mean:.2f}% ± {std:.2f}%"


@dataclass
class FoldSummary:
    accuracy: list[float]
    f1: list[float]
    loss: list[float]
    train_time: list[float]
    trainable_percent: float

    @staticmethod
    def _mean_std(xs: list[float]) -> tuple[float, float]:
        return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)

    def row(self) -> str:
        return format_cell(self.accuracy)

    def as_dict(self) -> dict:
        acc_m, acc_s = self._mean_std(self.accuracy)
        f1_m, f1_s = self._mean_std(self.f1)
        return {
            "folds": len(self.accuracy),
            "accuracy": self.accuracy,
            "f1": self.f1,
            "loss": self.loss,
            "train_time": self.train_time,
            "acc_mean": acc_m,
            "acc_std": acc_s,
            "f1_mean": f1_m,
            "f1_std": f1_s,
            "time_mean_s": statistics.fmean(self.train_time),
            "trainable_pct": self.trainable_percent,
            "row": self.row(),
        }


# ---------------------------------------------------------------------------
# helpers


def _labels(entries: list[ManifestEntry]) -> dict[str, int]:
    return {name: i for i, name in enumerate(class_names(entries))}


class FeatureStore:
    """Featurize each (clip, augmentation) once and hand out stacked arrays."""

    def __init__(self, cfg: RunConfig, labels: dict[str, int]):
        self.cfg = cfg
        self.labels = labels
        self.features: dict[tuple[int, int | None], np.ndarray] = {}

    def dataset(self, items: list[TrainingItem]) -> ArrayDataset:
        todo = [it for it in items if (it.source, it.aug_index) not in self.features]
        if todo:
            arr = featurize(
                todo, self.cfg.feature_config(), self.cfg.augmentation_plan(),
                self.cfg.augmentation_spec(), self.cfg.feature_cache or None,
            )
            for it, x in zip(todo, arr):
                self.features[(it.source, it.aug_index)] = x
        x = np.stack([self.features[(it.source, it.aug_index)] for it in items])
        y = np.array([self.labels[it.entry.label] for it in items], dtype=np.int64)
        ids = np.array([it.source for it in items], dtype=np.int64)
        return ArrayDataset(x, y, ids)


def _standardize(train: ArrayDataset, *others: ArrayDataset) -> tuple[float, float]:
    mean = float(train.x.mean())
    std = float(train.x.std()) or 1.0
    for d in (train, *others):
        d.x = ((d.x - mean) / std).astype(np.float32)
    return mean, std


def build_adapted_model(cfg: RunConfig, n_classes: int, input_frames: int, seed: int):
    base = build_model(cfg.model, cfg.model_config(n_classes, input_frames), seed)
    if cfg.init_checkpoint:
        load_checkpoint(base, cfg.init_checkpoint, namespaces=("param", "buffer"))
    model, mask = apply_strategy(base, cfg.strategy_config())
    return model, mask, param_stats(model, mask)


def _write_predictions(path: Path, data: ArrayDataset, preds: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "label", "prediction"])
        for cid, y, p in zip(data.ids, data.y, preds):
            w.writerow([int(cid), int(y), int(p)])


def write_confusion(path: Path, y_true, y_pred, classes: list[str]) -> np.ndarray:
    cm = confusion_matrix(y_true, y_pred, len(classes))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *classes])
        for name, row in zip(classes, cm):
            w.writerow([name, *map(int, row)])
    return cm


def _save_model(model: Module, run_dir: Path) -> None:
    save_checkpoint(model, run_dir / "base.ckpt", namespaces=("param", "buffer"))
    if adapter_parameters(model):
        save_checkpoint(model, run_dir / "adapter.ckpt", namespaces=("adapter",))


def _finish(run_dir: Path, cfg: RunConfig, model: Module, result, classes, stats, held_out: dict[str, ArrayDataset], extra: dict):
    model.load_state_dict(result.best_state)
    _save_model(model, run_dir)
    summary = {
        "model": cfg.model,
        "strategy": cfg.strategy,
        "augs": cfg.augs,
        "classes": classes,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "train_time": result.train_time,
        "total_params": stats.total,
        "trainable_params": stats.trainable,
        "trainable_pct": stats.percent,
        **extra,
    }
    for name, data in held_out.items():
        preds, loss = predict(model, data)
        summary[name] = {
            "loss": loss,
            "accuracy": float(np.mean(preds == data.y)),
            "f1": macro_f1(data.y, preds, len(classes)),
            "n": len(data),
        }
        _write_predictions(run_dir / f"predictions_{name}.csv", data, preds)
        if name == "inference":
            write_confusion(run_dir / "confusion.csv", data.y, preds, classes)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# single split


def run_single(cfg: RunConfig, run_dir: str | Path) -> dict:
    """60/20/10/10 split → inflate train and test → featurize → fit → evaluate clean splits."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dumps())
    entries = parse_manifest(cfg.manifest)
    labels = _labels(entries)
    classes = list(labels)
    assignment = stratified_split(entries, seed=cfg.seed)
    (run_dir / "splits.csv").write_text(assignment.report())
    by_id = {e.clip_id: e for e in entries}
    plan = cfg.augmentation_plan()

    def ents(split):
        return [by_id[i] for i in assignment.ids(split)]

    train_items = inflate(ents(Split.TRAIN), plan, Split.TRAIN)
    test_items = inflate(ents(Split.TEST), plan, Split.TEST)
    val_items = [TrainingItem(e) for e in ents(Split.VALIDATION)]
    inf_items = [TrainingItem(e) for e in ents(Split.INFERENCE)]
    check_no_leakage(train_items + test_items, assignment.ids(Split.VALIDATION), assignment.ids(Split.INFERENCE))

    store = FeatureStore(cfg, labels)
    train, test, val, inf = (store.dataset(x) for x in (train_items, test_items, val_items, inf_items))
    mean, std = _standardize(train, test, val, inf)

    model, mask, stats = build_adapted_model(cfg, len(classes), train.x.shape[-1], cfg.seed)
    result = fit(
        model, train, test, mask, cfg.optimizer_config(), cfg.train_config(), cfg.scheduler(),
        monitor_name="test", extra={"validation": val}, trainable_percent=stats.percent,
        log=JsonlWriter(run_dir / "metrics.jsonl"),
    )
    summary = _finish(
        run_dir, cfg, model, result, classes, stats,
        {"validation": val, "inference": inf},
        {"feature_mean": mean, "feature_std": std},
    )
    consolidate([run_dir], run_dir / "summary.csv")
    return summary


# ---------------------------------------------------------------------------
# k-fold


def _run_fold(args) -> dict:
    cfg, fold, fold_dir, train, val, inf, classes = args
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    (fold_dir / "config.txt").write_text(cfg.dumps())
    mean, std = _standardize(train, val, inf)
    model, mask, stats = build_adapted_model(cfg, len(classes), train.x.shape[-1], cfg.seed + fold)
    result = fit(
        model, train, val, mask, cfg.optimizer_config(), cfg.train_config(), cfg.scheduler(),
        monitor_name="validation", trainable_percent=stats.percent,
        log=JsonlWriter(fold_dir / "metrics.jsonl"),
    )
    return _finish(
        fold_dir, cfg, model, result, classes, stats,
        {"validation": val, "inference": inf},
        {"fold": fold, "feature_mean": mean, "feature_std": std},
    )


def run_kfold(cfg: RunConfig, run_dir: str | Path) -> FoldSummary:
    """Fixed 10% inference hold-out; each fold validates on one of k stratified parts."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dumps())
    entries = parse_manifest(cfg.manifest)
    labels = _labels(entries)
    classes = list(labels)
    plan = kfold_plan(entries, cfg.folds, cfg.seed)
    (run_dir / "folds.csv").write_text(plan.report())
    by_id = {e.clip_id: e for e in entries}
    aug = cfg.augmentation_plan()
    store = FeatureStore(cfg, labels)
    inf = store.dataset([TrainingItem(by_id[i]) for i in sorted(plan.inference)])

    jobs = []
    for fold in range(plan.k):
        train_items = inflate([by_id[i] for i in sorted(plan.train(fold))], aug, Split.TRAIN)
        check_no_leakage(train_items, plan.validation(fold), plan.inference)
        train = store.dataset(train_items)
        val = store.dataset([TrainingItem(by_id[i]) for i in sorted(plan.validation(fold))])
        fold_inf = ArrayDataset(inf.x.copy(), inf.y, inf.ids)
        jobs.append((cfg, fold, str(run_dir / f"fold_{fold}"), train, val, fold_inf, classes))

    if cfg.parallel_folds > 1:
        with ProcessPoolExecutor(cfg.parallel_folds) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(job) for job in jobs]

    summary = FoldSummary(
        accuracy=[r["validation"]["accuracy"] for r in results],
        f1=[r["validation"]["f1"] for r in results],
        loss=[r["validation"]["loss"] for r in results],
        train_time=[r["train_time"] for r in results],
        trainable_percent=results[0]["trainable_pct"],
    )
    payload = {"model": cfg.model, "strategy": cfg.strategy, "augs": cfg.augs, "kfold": True, **summary.as_dict()}
    (run_dir / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    consolidate([run_dir], run_dir / "summary.csv")
    return summary


# ---------------------------------------------------------------------------
# parameter table and consolidated report

STRATEGY_ORDER = ("full", "classifier_only", "batchnorm", "ssf", "ia3", "oft")
MODEL_ORDER = ("cnn", "transformer")
REPORT_COLUMNS = ("model", "strategy", "augs", "acc_mean", "acc_std", "f1_mean", "f1_std", "time_mean_s", "trainable_pct")


def params_table(cfg: RunConfig) -> list[dict]:
    """Dry-construct every (model, strategy) cell; inapplicable cells carry ``None``."""
    rows = []
    for strategy in STRATEGY_ORDER:
        for arch in MODEL_ORDER:
            c = replace(cfg, model=arch, strategy=strategy)
            try:
                _, _, stats = build_adapted_model(c, c.n_classes, c.input_frames, c.seed)
            except StrategyError:
                stats = None
            rows.append({"model": arch, "strategy": strategy, "stats": stats})
    return rows


def render_params_table(rows: list[dict]) -> str:
    lines = [f"{'strategy':<16}" + "".join(f"{m:>36}" for m in MODEL_ORDER)]
    for strategy in STRATEGY_ORDER:
        cells = []
        for arch in MODEL_ORDER:
            stats = next(r["stats"] for r in rows if r["model"] == arch and r["strategy"] == strategy)
            cells.append("-" if stats is None else f"{stats.trainable}/{stats.total} ({stats.percent:.2f}%)")
        lines.append(f"{strategy:<16}" + "".join(f"{c:>36}" for c in cells))
    return "\n".join(lines) + "\n"


def _run_record(run_dir: Path) -> dict:
    path = run_dir / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir}: no summary.json (is this a completed run directory?)")
    summary = json.loads(path.read_text())
    if summary.get("kfold"):
        return {
            "key": (summary["model"], summary["strategy"], summary["augs"]),
            "accuracy": summary["accuracy"],
            "f1": summary["f1"],
            "time": summary["train_time"],
            "trainable_pct": summary["trainable_pct"],
        }
    return {
        "key": (summary["model"], summary["strategy"], summary["augs"]),
        "accuracy": [summary["validation"]["accuracy"]],
        "f1": [summary["validation"]["f1"]],
        "time": [summary["train_time"]],
        "trainable_pct": summary["trainable_pct"],
    }


def _confusions_from_predictions(run_dir: Path) -> None:
    """Rebuild confusion.csv for a run (and each fold) from its saved inference predictions."""
    for pred in sorted(run_dir.glob("**/predictions_inference.csv")):
        summary = json.loads((pred.parent / "summary.json").read_text())
        with pred.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
        p = np.array([int(r["prediction"]) for r in rows], dtype=np.int64)
        write_confusion(pred.parent / "confusion.csv", y, p, summary["classes"])


def consolidate(run_dirs: list[str | Path], out_csv: str | Path) -> list[dict]:
    """One row per (model, strategy, augs); single runs sharing a key are pooled like folds."""
    groups: dict[tuple, dict] = {}
    for d in map(Path, run_dirs):
        rec = _run_record(d)
        _confusions_from_predictions(d)
        g = groups.setdefault(rec["key"], {"accuracy": [], "f1": [], "time": [], "trainable_pct": rec["trainable_pct"]})
        g["accuracy"] += rec["accuracy"]
        g["f1"] += rec["f1"]
        g["time"] += rec["time"]
    rows = []
    for (model, strategy, augs), g in groups.items():
        acc_m, acc_s = FoldSummary._mean_std(g["accuracy"])
        f1_m, f1_s = FoldSummary._mean_std(g["f1"])
        rows.append({
            "model": model, "strategy": strategy, "augs": augs,
            "acc_mean": f"{100 * acc_m:.2f}", "acc_std": f"{100 * acc_s:.2f}",
            "f1_mean": f"{100 * f1_m:.2f}", "f1_std": f"{100 * f1_s:.2f}",
            "time_mean_s": f"{statistics.fmean(g['time']):.2f}",
            "trainable_pct": f"{g['trainable_pct']:.2f}",
        })
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="") as fh:
        fh.write("# accuracy and F1 in percent; std is the sample (n-1) standard deviation across runs/folds\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows
