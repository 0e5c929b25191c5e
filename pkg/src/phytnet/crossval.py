"""k-fold cross-validation over a fixed :class:`~phytnet.data.FoldPlan`."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import arch
from .data import DatasetManifest, FoldPlan, channel_stats, load_images
from .errors import FoldError
from .metrics import MetricsReport, confusion_matrix, metrics, summarize
from .train import FoldData, TrainConfig, evaluate, train


@dataclass
class FoldResult:
    fold: int
    train: MetricsReport
    val: MetricsReport
    best_epoch: int
    stopped_epoch: int
    train_f1_history: list[float]
    val_ids: list[str]
    train_ids: list[str]

    @property
    def gap(self) -> float:
        """Overfitting gap: train macro F1 minus val macro F1."""
        return self.train.macro_f1 - self.val.macro_f1

    def row(self) -> dict:
        return {
            "fold": self.fold,
            "train_macro_f1": self.train.macro_f1,
            "val_macro_f1": self.val.macro_f1,
            "gap": self.gap,
            "val_accuracy": self.val.accuracy,
            "val_precision": self.val.precision,
            "val_recall": self.val.recall,
            "val_f1": self.val.f1,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


@dataclass
class CVReport:
    folds: list[FoldResult]
    class_names: list[str]
    summaries: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summaries:
            self.summaries = summarize_folds([f.row() for f in self.folds], self.class_names)

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "class_names": self.class_names,
            "folds": [f.row() | {"train": f.train.to_dict(), "val": f.val.to_dict()} for f in self.folds],
            "summaries": self.summaries,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def summarize_folds(rows: list[dict], class_names: list[str]) -> dict:
    """Median/IQR/min/max of each per-fold metric, computed from exactly these rows."""
    out = {key: summarize([r[key] for r in rows]) for key in ("train_macro_f1", "val_macro_f1", "gap", "val_accuracy")}
    for metric in ("val_f1", "val_precision", "val_recall"):
        for c, name in enumerate(class_names):
            out[f"{metric}[{name}]"] = summarize([r[metric][c] for r in rows])
    return out


def cross_validate(builder: arch.ModelConfig | Callable[[], arch.Model], manifest: DatasetManifest,
                   fold_plan: FoldPlan, train_cfg: TrainConfig, *, images: np.ndarray | None = None,
                   input_size: int | None = None, run_dir=None) -> CVReport:
    """Train a fresh model per fold on the other folds and validate on the held-out one.

    ``builder`` is a :class:`ModelConfig` (built with ``train_cfg.seed``) or a
    zero-argument factory. Normalization statistics come from each fold's
    training images and are written into ``fold_plan.norm_stats``. The same
    plan can be reused for any number of architectures.
    """
    make_model, images = _resolve(builder, manifest, train_cfg, images, input_size)
    ids = manifest.source_ids
    labels = manifest.labels
    folds_of = np.array([fold_plan.assignment[s] for s in ids])
    run_dir = Path(run_dir) if run_dir is not None else None
    summary_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fold_plan.save(run_dir / "folds.json")
        summary_file = (run_dir / "metrics.jsonl").open("w")

    results = []
    try:
        for i in range(fold_plan.k):
            try:
                result = _run_fold(i, make_model, images, labels, ids, folds_of, manifest, fold_plan, train_cfg,
                                   None if run_dir is None else run_dir / f"fold_{i:02d}")
            except Exception as exc:  # attach the fold index, keep the cause
                raise FoldError(i, exc) from exc
            results.append(result)
            if summary_file is not None:
                summary_file.write(json.dumps(result.row()) + "\n")
                summary_file.flush()
    finally:
        if summary_file is not None:
            summary_file.close()
    report = CVReport(results, list(manifest.class_names))
    if run_dir is not None:
        report.save(run_dir / "cv_report.json")
        fold_plan.save(run_dir / "folds.json")  # now with every fold's statistics
    return report


def _resolve(builder, manifest, train_cfg, images, input_size):
    if isinstance(builder, arch.ModelConfig):
        cfg = builder
        make_model = lambda: arch.build_model(cfg, train_cfg.seed)  # noqa: E731
        input_size = input_size or cfg.input_size
    else:
        make_model = builder
    if images is None:
        if input_size is None:
            input_size = make_model().config.input_size
        images = load_images(manifest, input_size)
    return make_model, images


def holdout(builder: arch.ModelConfig | Callable[[], arch.Model], manifest: DatasetManifest, fold_plan: FoldPlan,
            fold: int, train_cfg: TrainConfig, *, images: np.ndarray | None = None, input_size: int | None = None,
            run_dir=None) -> FoldResult:
    """Single train/validate run with fold ``fold`` of the plan held out."""
    if not 0 <= fold < fold_plan.k:
        raise ValueError(f"fold {fold} outside [0, {fold_plan.k})")
    make_model, images = _resolve(builder, manifest, train_cfg, images, input_size)
    folds_of = np.array([fold_plan.assignment[s] for s in manifest.source_ids])
    result = _run_fold(fold, make_model, images, manifest.labels, manifest.source_ids, folds_of, manifest,
                       fold_plan, train_cfg, run_dir)
    if run_dir is not None:
        fold_plan.save(Path(run_dir) / "folds.json")
    return result


def _run_fold(i, make_model, images, labels, ids, folds_of, manifest, plan, train_cfg, fold_dir) -> FoldResult:
    va = folds_of == i
    tr = ~va
    train_ids = [s for s, t in zip(ids, tr) if t]
    val_ids = [s for s, v in zip(ids, va) if v]
    if set(train_ids) & set(val_ids):
        raise AssertionError(f"fold {i}: validation samples leaked into training")
    stats = channel_stats(images[tr])
    plan.norm_stats[i] = stats
    fd = FoldData(images[tr], labels[tr], images[va], labels[va], stats["mean"], stats["std"],
                  manifest.num_classes, train_ids, val_ids)
    model = make_model()
    report = train(model, fd, train_cfg, fold_dir)
    if fold_dir is not None:  # the checkpoint needs these to be usable on raw images
        (Path(fold_dir) / "norm_stats.json").write_text(json.dumps(stats) + "\n")
    for name, p in model.parameters().items():
        p.data = report.best_state[name]
    nc = manifest.num_classes
    _, tr_pred = evaluate(model, fd.train_images, fd.train_labels, fd.mean, fd.std, nc, train_cfg.eval_batch_size)
    _, va_pred = evaluate(model, fd.val_images, fd.val_labels, fd.mean, fd.std, nc, train_cfg.eval_batch_size)
    return FoldResult(
        fold=i,
        train=metrics(confusion_matrix(fd.train_labels, tr_pred, nc)),
        val=metrics(confusion_matrix(fd.val_labels, va_pred, nc)),
        best_epoch=report.best_epoch,
        stopped_epoch=report.stopped_epoch,
        train_f1_history=report.train_f1,
        val_ids=val_ids,
        train_ids=train_ids,
    )
