"""Supervised training: AdamW, L1-augmented cross entropy, patience-based early
stopping and best-validation-F1 checkpointing."""
from __future__ import annotations

import dataclasses
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arch
from .data import augment
from .errors import ConfigurationError
from .metrics import macro_f1, predict_class
from .ops import softmax_cross_entropy
from .tensor import Tensor, backward, no_grad


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-6
    l1_weight: float = 1e-5
    patience: int = 20
    max_epochs: int = 200
    batch_size: int = 16
    seed: int = 42
    workers: int = 1
    augment: bool = True
    eval_batch_size: int = 64

    def validate(self) -> "TrainConfig":
        checks = [
            ("lr", 1e-6 <= self.lr <= 1e-3, "[1e-6, 1e-3]"),
            ("beta1", 0.88 <= self.beta1 <= 0.99, "[0.88, 0.99]"),
            ("beta2", 0.93 <= self.beta2 <= 0.999, "[0.93, 0.999]"),
            ("weight_decay", self.weight_decay >= 0, ">= 0"),
            ("eps", self.eps >= 0, ">= 0"),
            ("l1_weight", self.l1_weight >= 0, ">= 0"),
            ("patience", self.patience >= 1, ">= 1"),
            ("max_epochs", self.max_epochs >= 1, ">= 1"),
            ("batch_size", self.batch_size >= 1, ">= 1"),
            ("workers", self.workers >= 1, ">= 1"),
        ]
        for name, ok, rng in checks:
            if not ok:
                raise ConfigurationError(f"TrainConfig.{name}={getattr(self, name)} outside {rng}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunContext:
    """Every random stream of a run, derived from one seed.

    Streams are keyed by what they are used for (epoch, batch, sample
    position), never by which thread happens to compute them, so results do
    not depend on the number of prefetch workers.
    """

    seed: int

    def shuffle_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1, epoch])

    def augment_rng(self, epoch: int, position: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 2, epoch, position])

    def layer_rng(self, epoch: int, batch: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 3, epoch, batch])

    @property
    def init_seed(self) -> int:
        return self.seed


def set_determinism(seed: int = 42) -> RunContext:
    """Seed the ambient generators too, so stray library randomness is repeatable."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    return RunContext(seed)


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------


def l1_penalty(params, weight: float) -> Tensor:
    """``weight * sum(|theta|)`` over all parameters (subgradient 0 at 0)."""
    if weight < 0:
        raise ConfigurationError("l1 weight must be non-negative")
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    total = None
    for p in tensors:
        term = p.abs().sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.float32(0.0))
    return total * weight


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, state: OptimState, cfg: TrainConfig, grads: dict | None = None) -> OptimState:
    """One AdamW update in place, with bias correction and decoupled weight decay.

    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    Moments are kept in float64. Parameters without a gradient are skipped.
    """
    state.t += 1
    b1, b2, lr = cfg.beta1, cfg.beta2, cfg.lr
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / c2) + cfg.eps
        # with eps=0 a zero gradient history would give 0/0; its step is 0
        step = lr * np.divide(m / c1, denom, out=np.zeros_like(m), where=denom > 0)
        p.data = (p.data.astype(np.float64) * (1.0 - lr * cfg.weight_decay) - step).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower val loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.wait = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def stopping_epoch(val_losses, patience: int, max_epochs: int | None = None) -> int:
    """1-based epoch at which training stops for an injected val-loss sequence."""
    stopper = EarlyStopping(patience)
    limit = len(val_losses) if max_epochs is None else min(max_epochs, len(val_losses))
    for epoch in range(1, limit + 1):
        if stopper.step(val_losses[epoch - 1]):
            return epoch
    return limit


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class FoldData:
    """Pre-resized images in [0, 1] plus the normalization used for this fold."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    mean: list[float]
    std: list[float]
    num_classes: int
    train_ids: list[str] | None = None
    val_ids: list[str] | None = None


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_f1: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_f1: float = -1.0
    checkpoint: str | None = None
    batch_log: list[dict] = field(default_factory=list)
    best_state: dict | None = None

    def epoch_rows(self) -> list[dict]:
        return [
            {"epoch": i + 1, "train_loss": self.train_loss[i], "train_f1": self.train_f1[i],
             "val_loss": self.val_loss[i], "val_f1": self.val_f1[i]}
            for i in range(len(self.train_loss))
        ]


def _normalizer(mean, std):
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return lambda x: (x - mean) / std


def evaluate(model: arch.Model, images: np.ndarray, labels: np.ndarray, mean, std, num_classes: int,
             batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Eval-mode mean cross entropy and predicted classes over a whole split."""
    norm = _normalizer(mean, std)
    total, preds = 0.0, []
    with no_grad():
        for s in range(0, len(images), batch_size):
            x = norm(images[s : s + batch_size])
            y = labels[s : s + batch_size]
            logits = model(Tensor(x), "eval")
            total += float(softmax_cross_entropy(logits, y).data) * len(y)
            preds.append(predict_class(logits, num_classes))
    return total / len(images), np.concatenate(preds)


def _make_batch(images, positions, epoch, ctx: RunContext, do_augment: bool, norm):
    if do_augment:
        batch = np.stack([augment(images[i], ctx.augment_rng(epoch, int(i))) for i in positions])
    else:
        batch = images[positions]
    return norm(batch)


def train(model: arch.Model, fold_data: FoldData, cfg: TrainConfig, run_dir=None) -> TrainReport:
    """Train ``model`` in place; return per-epoch losses/F1 and the best-F1 epoch.

    With ``run_dir`` set, writes ``config.json``, ``metrics.jsonl`` (one line
    per epoch) and ``best.ckpt`` (rewritten at every new best val F1).
    """
    cfg.validate()
    fd = fold_data
    if len(fd.train_images) == 0 or len(fd.val_images) == 0:
        raise ConfigurationError("train and validation splits must both be non-empty")
    ctx = set_determinism(cfg.seed)
    params = model.parameters()
    state = OptimState()
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    norm = _normalizer(fd.mean, fd.std)
    n = len(fd.train_images)

    metrics_file = ckpt_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg_blob = {"model": model.blob(), "train": cfg.to_dict()}
        (run_dir / "config.json").write_text(json.dumps(cfg_blob, indent=2, sort_keys=True) + "\n")
        metrics_file = (run_dir / "metrics.jsonl").open("w")
        ckpt_path = run_dir / "best.ckpt"

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = ctx.shuffle_rng(epoch).permutation(n)
            batches = [order[s : s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]

            def build(b):
                return _make_batch(fd.train_images, b, epoch, ctx, cfg.augment, norm)

            stream = pool.map(build, batches) if pool is not None else map(build, batches)
            loss_sum, preds, seen = 0.0, [], []
            for bi, (idx, x) in enumerate(zip(batches, stream)):
                y = fd.train_labels[idx]
                logits = model(Tensor(x), "train", ctx.layer_rng(epoch, bi))
                ce = softmax_cross_entropy(logits, y)
                l1 = l1_penalty(params, cfg.l1_weight)
                loss = ce + l1
                for p in params.values():
                    p.zero_grad()
                backward(loss)
                adamw_step(params, state, cfg)
                report.batch_log.append(
                    {"epoch": epoch, "batch": bi, "loss": float(loss.data), "ce": float(ce.data), "l1": float(l1.data)}
                )
                loss_sum += float(loss.data) * len(idx)
                preds.append(predict_class(logits, fd.num_classes))
                seen.append(y)
            train_loss = loss_sum / n
            train_f1 = macro_f1(np.concatenate(seen), np.concatenate(preds), fd.num_classes)
            val_loss, val_pred = evaluate(model, fd.val_images, fd.val_labels, fd.mean, fd.std,
                                          fd.num_classes, cfg.eval_batch_size)
            val_f1 = macro_f1(fd.val_labels, val_pred, fd.num_classes)

            report.train_loss.append(train_loss)
            report.train_f1.append(train_f1)
            report.val_loss.append(val_loss)
            report.val_f1.append(val_f1)
            if metrics_file is not None:
                metrics_file.write(json.dumps(report.epoch_rows()[-1]) + "\n")
                metrics_file.flush()
            if val_f1 > report.best_val_f1:
                report.best_val_f1 = val_f1
                report.best_epoch = epoch
                report.best_state = {k: p.data.copy() for k, p in params.items()}
                if ckpt_path is not None:
                    arch.save_checkpoint(model, ckpt_path)
                    report.checkpoint = str(ckpt_path)
            report.stopped_epoch = epoch
            if stopper.step(val_loss):
                break
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_file is not None:
            metrics_file.close()
    return report
