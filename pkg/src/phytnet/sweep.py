"""Constraint-gated Bayesian sweep over architecture and optimizer settings."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import arch
from .errors import ConfigurationError
from .gp import expected_improvement, gp_fit
from .train import TrainConfig

# ranges searched by the original sweep; wider bounds need override=True
DEFAULT_BOUNDS = {
    "mid_kernel": (1, 19),
    "channels": (16, 128),
    "blocks_per_stage": (1, 4),
    "input_size": (200, 500),
    "lr": (1e-6, 1e-3),
    "out_nodes": (4, 10),
    "beta1": (0.88, 0.99),
    "beta2": (0.93, 0.999),
}
INT_DIMS = ("mid_kernel", "channels", "blocks_per_stage", "input_size", "out_nodes")


@dataclass
class SweepSpace:
    """Bounded mixed integer/continuous search domain.

    Integers are encoded linearly onto [0, 1] and snapped back; the learning
    rate is encoded in log10 space. Channel counts are snapped to multiples
    of ``channel_step`` so the bottleneck width ``channels // 4`` is integral.
    """

    mid_kernel: tuple[int, int] = (1, 19)
    channels: tuple[int, int] = (16, 128)
    blocks_per_stage: tuple[int, int] = (1, 4)
    input_size: tuple[int, int] = (200, 500)
    lr: tuple[float, float] = (1e-6, 1e-3)
    out_nodes: tuple[int, int] = (4, 10)
    beta1: tuple[float, float] = (0.88, 0.99)
    beta2: tuple[float, float] = (0.93, 0.999)
    n_stages: int = 4
    num_classes: int = 4
    max_groups: int = 8
    channel_step: int = 4
    override: bool = False

    names = tuple(DEFAULT_BOUNDS)

    def __post_init__(self):
        for name in self.names:
            lo, hi = getattr(self, name)
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi:
                raise ConfigurationError(f"sweep bound {name}: lower {lo} > upper {hi}")
            plo, phi = DEFAULT_BOUNDS[name]
            if (lo < plo or hi > phi) and not self.override:
                raise ConfigurationError(
                    f"sweep bound {name}=({lo}, {hi}) leaves the default range ({plo}, {phi}); set override: true"
                )

    @property
    def dim(self) -> int:
        return len(self.names)

    def _ints(self, name) -> np.ndarray:
        lo, hi = getattr(self, name)
        if name == "mid_kernel":
            return np.arange(lo + (lo % 2 == 0), hi + 1, 2)
        if name == "channels":
            step = self.channel_step
            return np.arange(math.ceil(lo / step) * step, hi + 1, step)
        return np.arange(lo, hi + 1)

    def sample(self, rng: np.random.Generator) -> dict:
        point = {}
        for name in self.names:
            lo, hi = getattr(self, name)
            if name in INT_DIMS:
                point[name] = int(rng.choice(self._ints(name)))
            elif name == "lr":
                point[name] = float(10 ** rng.uniform(np.log10(lo), np.log10(hi)))
            else:
                point[name] = float(rng.uniform(lo, hi))
        return point

    def encode(self, point: dict) -> np.ndarray:
        u = []
        for name in self.names:
            lo, hi = getattr(self, name)
            v = point[name]
            if name == "lr":
                lo, hi, v = np.log10(lo), np.log10(hi), np.log10(v)
            u.append(0.5 if hi == lo else (v - lo) / (hi - lo))
        return np.array(u, dtype=np.float64)

    def decode(self, u) -> dict:
        point = {}
        for name, ui in zip(self.names, np.clip(u, 0, 1)):
            lo, hi = getattr(self, name)
            if name in INT_DIMS:
                vals = self._ints(name)
                point[name] = int(vals[np.argmin(np.abs(vals - (lo + ui * (hi - lo))))])
            elif name == "lr":
                point[name] = float(10 ** (np.log10(lo) + ui * (np.log10(hi) - np.log10(lo))))
            else:
                point[name] = float(lo + ui * (hi - lo))
        return point

    def contains(self, point: dict) -> bool:
        for name in self.names:
            lo, hi = getattr(self, name)
            if not lo <= point[name] <= hi:
                return False
        return point["mid_kernel"] % 2 == 1

    def model_config(self, point: dict, **overrides) -> arch.ModelConfig:
        c = int(point["channels"])
        # largest group count (<= max_groups) dividing every normalized width
        groups = math.gcd(math.gcd(self.max_groups, c), max(1, c // 4))
        cfg = dict(
            stem_channels=c,
            stage_channels=[c] * self.n_stages,
            blocks_per_stage=[int(point["blocks_per_stage"])] * self.n_stages,
            mid_kernel=int(point["mid_kernel"]),
            out_nodes=int(point["out_nodes"]),
            num_classes=self.num_classes,
            input_size=int(point["input_size"]),
            groups=groups,
        )
        cfg.update(overrides)
        return arch.ModelConfig(**cfg)

    def train_config(self, point: dict, base: TrainConfig | None = None) -> TrainConfig:
        base = base or TrainConfig()
        return dataclasses.replace(base, lr=point["lr"], beta1=point["beta1"], beta2=point["beta2"])

    def to_dict(self) -> dict:
        d = {name: list(getattr(self, name)) for name in self.names}
        d.update(n_stages=self.n_stages, num_classes=self.num_classes, max_groups=self.max_groups,
                 channel_step=self.channel_step, override=self.override)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpace":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown sweep key(s): {', '.join(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SweepSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BoxSpace:
    """Continuous box, used for toy objectives. Points are ``{"x0": ..., "x1": ...}``."""

    bounds: list[tuple[float, float]]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"x{i}" for i in range(len(self.bounds)))

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def sample(self, rng) -> dict:
        return {n: float(rng.uniform(lo, hi)) for n, (lo, hi) in zip(self.names, self.bounds)}

    def encode(self, point) -> np.ndarray:
        return np.array([(point[n] - lo) / (hi - lo) for n, (lo, hi) in zip(self.names, self.bounds)])


def sample_space(space, rng: np.random.Generator) -> dict:
    return space.sample(rng)


# ---------------------------------------------------------------------------
# cost gate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateVerdict:
    passed: bool
    reasons: tuple[str, ...]
    n_params: int
    gflops: float


def gate_verdict(n_params: int, gflops: float, max_params: int = arch.MAX_PARAMS,
                 max_gflops: float = arch.MAX_GFLOPS) -> GateVerdict:
    """Terminate when strictly above either budget; values on the boundary pass."""
    reasons = []
    if n_params > max_params:
        reasons.append("params")
    if gflops > max_gflops:
        reasons.append("gflops")
    return GateVerdict(not reasons, tuple(reasons), int(n_params), float(gflops))


def constraint_gate(config, space: SweepSpace | None = None) -> GateVerdict:
    """Measure a candidate before training and apply the parameter/GFLOP budget.

    ``config`` may be a sweep point (needs ``space``), a :class:`ModelConfig`
    or an already built model. An unbuildable config raises
    :class:`ConfigurationError`; the sweep records that as a failed trial.
    """
    if isinstance(config, arch.Model):
        model = config
        size = config.config.input_size if config.config is not None else None
    else:
        cfg = config if isinstance(config, arch.ModelConfig) else (space or SweepSpace()).model_config(config)
        model = arch.PhytNet(cfg)  # shapes only; weights are never initialized
        size = cfg.input_size
    if size is None:
        raise ConfigurationError("models without a config need an explicit input size; use gate_verdict")
    return gate_verdict(arch.count_params(model), arch.count_flops(model, size) / 1e9)


# ---------------------------------------------------------------------------
# sweep loop
# ---------------------------------------------------------------------------


@dataclass
class Trial:
    index: int
    config: dict
    status: str  # proposed | gated_out | trained | failed
    val_f1: float | None = None
    n_params: int | None = None
    gflops: float | None = None
    log_version: int = 0
    reasons: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        return cls(**json.loads(line))


@dataclass
class SweepResult:
    best: Trial | None
    trials: list[Trial]


def propose_next(gp, space, rng: np.random.Generator, n_candidates: int = 512, best: float | None = None) -> dict:
    """Draw ``n_candidates`` points and return the one with the largest EI (first on ties)."""
    if n_candidates < 1:
        raise ConfigurationError("n_candidates must be >= 1")
    cands = [space.sample(rng) for _ in range(n_candidates)]
    if n_candidates == 1:
        return cands[0]
    enc = np.stack([space.encode(c) for c in cands])
    mu, sd = gp.posterior(enc)
    incumbent = float(np.max(gp.y)) if best is None else best
    ei = expected_improvement(mu, sd, incumbent)
    return cands[int(np.argmax(ei))]


def read_log(path) -> list[Trial]:
    path = Path(path)
    if not path.exists():
        return []
    return [Trial.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def run_sweep(budget: int, evaluator: Callable[[dict], float], space, seed: int = 42, *,
              init_random: int = 10, n_candidates: int = 512, gate: Callable | None | str = "auto",
              log_path=None, noise: float = 1e-6, n_restarts: int = 5) -> SweepResult:
    """Random warm-up, then GP/EI proposals; every trial is gated, evaluated and logged.

    Each trial's randomness comes from ``(seed, trial index)``, so a sweep
    resumed from its JSONL log makes the same next proposal as an
    uninterrupted one. ``gate="auto"`` applies :func:`constraint_gate` for a
    :class:`SweepSpace` and nothing for other spaces.
    """
    if not budget >= init_random >= 1:
        raise ConfigurationError(f"need budget >= init_random >= 1, got {budget}, {init_random}")
    if gate == "auto":
        gate = (lambda p: constraint_gate(p, space)) if isinstance(space, SweepSpace) else None
    trials = read_log(log_path) if log_path is not None else []
    log = Path(log_path).open("a") if log_path is not None else None
    try:
        for idx in range(len(trials), budget):
            rng = np.random.default_rng([seed, idx])
            trained = [t for t in trials if t.status == "trained"]
            if idx < init_random or len(trained) < 2:
                point = space.sample(rng)
            else:
                x = np.stack([space.encode(t.config) for t in trained])
                y = np.array([t.val_f1 for t in trained])
                gp = gp_fit(x, y, noise, seed=[seed, idx], n_restarts=n_restarts)
                point = propose_next(gp, space, rng, n_candidates, float(y.max()))
            trial = Trial(idx, point, "proposed", log_version=len(trials))
            try:
                if gate is not None:
                    verdict = gate(point)
                    trial.n_params, trial.gflops = verdict.n_params, verdict.gflops
                    if not verdict.passed:
                        trial.status, trial.reasons = "gated_out", list(verdict.reasons)
                if trial.status == "proposed":
                    trial.val_f1 = float(evaluator(point))
                    trial.status = "trained"
            except Exception as exc:  # a broken trial must not end the sweep
                trial.status, trial.error = "failed", repr(exc)
            trials.append(trial)
            if log is not None:
                log.write(trial.to_json() + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    trained = [t for t in trials if t.status == "trained"]
    best = max(trained, key=lambda t: t.val_f1) if trained else None
    return SweepResult(best, trials)
