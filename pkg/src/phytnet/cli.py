"""``phytnet`` command line: synth, train, cv, sweep, gradcam, flops, report.

Exit codes: 0 success, 1 usage error (the message names the flag), 2 runtime
failure (the message names the stage that failed).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import arch, crossval, data, gradcam, sweep
from .metrics import predict_class
from .train import TrainConfig

DEFAULT_RUNS_DIR = "runs"


class UsageExit(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageExit(f"{self.prog}: {message}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (StageFailure, UsageExit):
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


def runs_root() -> Path:
    return Path(os.environ.get("PHYTNET_RUNS_DIR", DEFAULT_RUNS_DIR))


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else runs_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_cfg(path) -> arch.ModelConfig:
    return arch.ModelConfig.load(path).validate()


def _load_train_cfg(args) -> TrainConfig:
    cfg = TrainConfig.load(args.train_cfg) if args.train_cfg else TrainConfig()
    overrides = {"seed": args.seed}
    if args.workers is not None:
        overrides["workers"] = args.workers
    return dataclasses.replace(cfg, **overrides).validate()


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    with stage("synthesize"):
        manifest = data.synthesize_dataset(args.per_class, args.seed, args.out, size=args.size)
    print(f"wrote {len(manifest.samples)} images in {manifest.num_classes} classes to {args.out}")
    return 0


def _prepare(args):
    with stage("load config"):
        model_cfg = _load_model_cfg(args.model)
        train_cfg = _load_train_cfg(args)
    with stage("load data"):
        manifest = data.load_dataset(args.data, args.seed)
        if manifest.num_classes != model_cfg.num_classes:
            raise ValueError(f"dataset has {manifest.num_classes} classes, model config says {model_cfg.num_classes}")
        for path, reason in manifest.rejects:
            print(f"skipped {path}: {reason}", file=sys.stderr)
    with stage("split"):
        plan = data.kfold_split(manifest, args.k, args.seed)
    return model_cfg, train_cfg, manifest, plan


def cmd_train(args) -> int:
    model_cfg, train_cfg, manifest, plan = _prepare(args)
    out = _out_dir(args, f"train-seed{args.seed}")
    with stage("train"):
        res = crossval.holdout(model_cfg, manifest, plan, args.fold, train_cfg, run_dir=out)
    print(f"train macro F1 {res.train.macro_f1:.4f}  val macro F1 {res.val.macro_f1:.4f}  "
          f"best epoch {res.best_epoch}  stopped {res.stopped_epoch}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return 0


def cmd_cv(args) -> int:
    model_cfg, train_cfg, manifest, plan = _prepare(args)
    out = _out_dir(args, f"cv-k{args.k}-seed{args.seed}")
    with stage("cross-validate"):
        crossval.cross_validate(model_cfg, manifest, plan, train_cfg, run_dir=out)
    print(emit_report(out))
    return 0


def cmd_sweep(args) -> int:
    with stage("load config"):
        space = sweep.SweepSpace.load(args.space) if args.space else sweep.SweepSpace()
        base = _load_train_cfg(args)
    with stage("load data"):
        manifest = data.load_dataset(args.data, args.seed)
        space = dataclasses.replace(space, num_classes=manifest.num_classes)
        plan = data.kfold_split(manifest, args.k, args.seed)
    out = _out_dir(args, f"sweep-seed{args.seed}")
    cache: dict[int, np.ndarray] = {}

    def evaluator(point):
        size = point["input_size"]
        if size not in cache:
            cache.clear()  # one resolution in memory at a time
            cache[size] = data.load_images(manifest, size)
        res = crossval.holdout(space.model_config(point), manifest, plan, args.fold,
                               space.train_config(point, base), images=cache[size])
        return res.val.macro_f1

    with stage("sweep"):
        result = sweep.run_sweep(args.budget, evaluator, space, args.seed, init_random=min(args.init_random, args.budget),
                                 n_candidates=args.candidates, log_path=out / "trials.jsonl")
    counts = {s: sum(t.status == s for t in result.trials) for s in ("trained", "gated_out", "failed")}
    print(f"{len(result.trials)} trials: " + ", ".join(f"{v} {k}" for k, v in counts.items()))
    if result.best is None:
        print("no trial was trained")
    else:
        (out / "best.json").write_text(result.best.to_json() + "\n")
        print(f"best val macro F1 {result.best.val_f1:.4f} at trial {result.best.index}: {json.dumps(result.best.config)}")
    return 0


def cmd_gradcam(args) -> int:
    ckpt = Path(args.ckpt)
    with stage("load checkpoint"):
        model = arch.load_checkpoint(ckpt)
    if not 0 <= args.target_class < model.out_nodes:
        raise UsageExit(f"phytnet gradcam: --class {args.target_class} outside [0, {model.out_nodes})")
    with stage("load image"):
        img = data.read_image(args.image)
        size = model.config.input_size if model.config is not None else img.shape[1]
        img = data.resize(img, size)
        stats_path = ckpt.parent / "norm_stats.json"
        if stats_path.exists():
            stats = json.loads(stats_path.read_text())
        else:
            print(f"no {stats_path.name} beside the checkpoint; normalizing with the image's own statistics",
                  file=sys.stderr)
            stats = data.channel_stats(img[None])
        x = (img - np.asarray(stats["mean"], np.float32)[:, None, None]) / np.asarray(stats["std"], np.float32)[:, None, None]
    with stage("grad-cam"):
        logits = arch.forward(model, x[None])
        n_classes = model.config.num_classes if model.config is not None else model.out_nodes
        pred = int(predict_class(logits, n_classes)[0])
        heat = gradcam.grad_cam(model, x.astype(np.float32), args.target_class)
    with stage("write overlay"):
        out = Path(args.out) if args.out else runs_root() / "gradcam"
        if out.suffix.lower() != ".png":
            out.mkdir(parents=True, exist_ok=True)
            out = out / gradcam.overlay_filename(Path(args.image).name, args.target_class, pred)
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
        gradcam.overlay(heat, img, out)
    print(f"class {args.target_class}, predicted {pred}, feature map {heat.source_shape} -> {out}")
    return 0


def cmd_flops(args) -> int:
    with stage("build model"):
        if args.model == "resnet18":
            model = arch.build_resnet18_reference()
            size = args.input_size or 224
        else:
            cfg = _load_model_cfg(args.model)
            model = arch.PhytNet(cfg)
            size = args.input_size or cfg.input_size
        report = arch.cost_report(model, size)
    verdict = sweep.gate_verdict(report.n_params, report.gflops)
    print(f"n_params {report.n_params}")
    print(f"GFLOPS {report.gflops:.4f} (MACs at {size}x{size})")
    print("gate pass" if verdict.passed else f"gate terminate ({', '.join(verdict.reasons)})")
    return 0


def cmd_report(args) -> int:
    with stage("report"):
        print(emit_report(args.run_dir))
    return 0


def _fmt(s: dict) -> str:
    return f"median {s['median']:.4f}  IQR {s['iqr']:.4f} [{s['q1']:.4f}, {s['q3']:.4f}]"


def emit_report(run_dir) -> str:
    """Per-fold rows plus median/IQR summaries recomputed from ``metrics.jsonl``."""
    run_dir = Path(run_dir)
    path = run_dir / "metrics.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path} is empty")
    lines = []
    if "fold" not in rows[0]:  # single training run: one row per epoch
        best = max(rows, key=lambda r: r["val_f1"])
        lines.append(f"{len(rows)} epochs; best val F1 {best['val_f1']:.4f} at epoch {best['epoch']}")
        lines.append(f"best checkpoint: {run_dir / 'best.ckpt'}")
        return "\n".join(lines)

    report_path = run_dir / "cv_report.json"
    n_classes = len(rows[0]["val_f1"])
    names = json.loads(report_path.read_text())["class_names"] if report_path.exists() else [str(c) for c in range(n_classes)]
    lines.append(f"{'fold':>4} {'train_F1':>9} {'val_F1':>8} {'gap':>8} {'best_ep':>7} {'stop_ep':>7}")
    for r in rows:
        lines.append(f"{r['fold']:>4} {r['train_macro_f1']:>9.4f} {r['val_macro_f1']:>8.4f} {r['gap']:>8.4f} "
                     f"{r['best_epoch']:>7} {r['stopped_epoch']:>7}")
    summaries = crossval.summarize_folds(rows, names)
    lines.append("")
    for key in ("train_macro_f1", "val_macro_f1", "gap", "val_accuracy"):
        lines.append(f"{key:<24} {_fmt(summaries[key])}")
    for metric in ("val_f1", "val_precision", "val_recall"):
        for name in names:
            key = f"{metric}[{name}]"
            lines.append(f"{key:<24} {_fmt(summaries[key])}")
    best = max(rows, key=lambda r: r["val_macro_f1"])
    fold_dir = run_dir / f"fold_{best['fold']:02d}"
    lines.append(f"best checkpoint: {fold_dir / 'best.ckpt'}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phytnet", description="Build, train, cross-validate and sweep small PhytNet CNNs.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write the synthetic 4-class texture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=60)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--size", type=int, default=128)
    s.set_defaults(func=cmd_synth)

    def training_flags(sp, needs_model=True):
        sp.add_argument("--data", required=True, help="dataset root with one directory per class")
        if needs_model:
            sp.add_argument("--model", required=True, help="ModelConfig JSON")
        sp.add_argument("--train-cfg", help="TrainConfig JSON (defaults otherwise)")
        sp.add_argument("--out", help="run directory (default: $PHYTNET_RUNS_DIR/...)")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--k", type=int, default=10)
        sp.add_argument("--workers", type=int, default=None, help="batch prefetch threads")

    t = sub.add_parser("train", help="train on all folds but one, validate on the held-out fold")
    training_flags(t)
    t.add_argument("--fold", type=int, default=0)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="k-fold cross-validation")
    training_flags(c)
    c.set_defaults(func=cmd_cv)

    w = sub.add_parser("sweep", help="constraint-gated Bayesian sweep")
    training_flags(w, needs_model=False)
    w.add_argument("--space", help="sweep definition JSON (defaults otherwise)")
    w.add_argument("--budget", type=int, default=30)
    w.add_argument("--fold", type=int, default=0)
    w.add_argument("--init-random", type=int, default=10)
    w.add_argument("--candidates", type=int, default=512)
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcam", help="Grad-CAM overlay for one image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--class", dest="target_class", type=int, required=True)
    g.add_argument("--out", help="PNG path or directory")
    g.set_defaults(func=cmd_gradcam)

    f = sub.add_parser("flops", help="parameter count, GFLOPS and gate verdict")
    f.add_argument("--model", required=True, help="ModelConfig JSON, or 'resnet18'")
    f.add_argument("--input-size", type=int)
    f.set_defaults(func=cmd_flops)

    r = sub.add_parser("report", help="summarize a train or cv run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def _unknown_flags(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Flags in ``argv`` the chosen verb does not define (prefix abbreviations allowed)."""
    verbs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    verb = next((a for a in argv if a in verbs), None)
    known = [opt for action in (verbs[verb] if verb else parser)._actions for opt in action.option_strings]
    flags = [a.split("=", 1)[0] for a in argv if a.startswith("--")]
    return [f for f in flags if not any(k.startswith(f) for k in known)]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageExit as exc:
        unknown = _unknown_flags(parser, argv)
        if unknown and "unrecognized" not in str(exc):
            print(f"phytnet: unrecognized arguments: {' '.join(unknown)}", file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except StageFailure as exc:
        print(f"phytnet: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
