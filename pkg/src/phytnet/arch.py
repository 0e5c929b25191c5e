"""PhytNet construction, parameter/FLOP counters, the ResNet18 reference and
the binary checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, ops
from .errors import ConfigurationError, DataError
from .tensor import Tensor

MAX_PARAMS = 2_000_000
MAX_GFLOPS = 6.0


@dataclass
class ModelConfig:
    """Sweepable description of a PhytNet network."""

    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [16])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1])
    mid_kernel: int = 3
    out_nodes: int = 4
    num_classes: int = 4
    input_size: int = 200
    groups: int = 8
    use_se: bool = False
    se_reduction: int = 4
    activation: str = "gelu"
    survive_prob: float = 1.0
    dropout_rate: float = 0.0

    def validate(self) -> "ModelConfig":
        def fail(name, msg):
            raise ConfigurationError(f"ModelConfig.{name}: {msg}")

        if len(self.stage_channels) != len(self.blocks_per_stage) or not self.stage_channels:
            fail("stage_channels", "must be non-empty and match blocks_per_stage in length")
        for c in self.stage_channels:
            if not 16 <= c <= 128:
                fail("stage_channels", f"{c} outside [16, 128]")
        for b in self.blocks_per_stage:
            if not 1 <= b <= 4:
                fail("blocks_per_stage", f"{b} outside [1, 4]")
        if not (1 <= self.mid_kernel <= 19 and self.mid_kernel % 2 == 1):
            fail("mid_kernel", f"{self.mid_kernel} is not an odd integer in [1, 19]")
        if not 4 <= self.out_nodes <= 10:
            fail("out_nodes", f"{self.out_nodes} outside [4, 10]")
        if not 1 <= self.num_classes <= self.out_nodes:
            fail("num_classes", f"{self.num_classes} must lie in [1, out_nodes={self.out_nodes}]")
        if not 200 <= self.input_size <= 500:
            fail("input_size", f"{self.input_size} outside [200, 500]")
        if self.stem_channels < 1:
            fail("stem_channels", "must be positive")
        if self.groups < 1:
            fail("groups", "must be positive")
        for c in [self.stem_channels, *self.stage_channels, *(max(1, c // 4) for c in self.stage_channels)]:
            if c % self.groups:
                fail("groups", f"{self.groups} does not divide channel count {c}")
        if self.activation not in nn.ACTIVATIONS:
            fail("activation", f"{self.activation!r} not in {nn.ACTIVATIONS}")
        if not 0.0 < self.survive_prob <= 1.0:
            fail("survive_prob", f"{self.survive_prob} outside (0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            fail("dropout_rate", f"{self.dropout_rate} outside [0, 1)")
        if self.use_se and not 1 <= self.se_reduction <= min(self.stage_channels):
            fail("se_reduction", f"{self.se_reduction} outside [1, {min(self.stage_channels)}]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.stage_channels = [int(c) for c in cfg.stage_channels]
        cfg.blocks_per_stage = [int(b) for b in cfg.blocks_per_stage]
        return cfg

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class Model(nn.Module):
    """A classifier: feature extractor, global average pool, linear head."""

    arch = "model"
    config = None

    @property
    def out_nodes(self) -> int:
        return self.head.dout

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def features(self, x: Tensor, mode: str, rng) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor, mode: str = "eval", rng=None, return_features: bool = False):
        feats = self.features(x, mode, rng)
        pooled = ops.global_avg_pool(feats).reshape(x.shape[0], -1)
        pooled = self.pre_head(pooled, mode, rng)
        logits = self.head(pooled)
        return (logits, feats) if return_features else logits

    def pre_head(self, pooled: Tensor, mode: str, rng) -> Tensor:
        return pooled

    def flops(self, size: int) -> float:
        raise NotImplementedError

    def blob(self) -> dict:
        raise NotImplementedError


class PhytNet(Model):
    arch = "phytnet"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.stem = self.add("stem", nn.Conv2d(3, cfg.stem_channels, 3, stride=2))
        self.stem_gn = self.add("stem_gn", nn.GroupNorm(cfg.stem_channels, cfg.groups))
        self.blocks: list[nn.Bottleneck] = []
        cin = cfg.stem_channels
        for s, (cout, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            for b in range(nblocks):
                stride = 2 if (s > 0 and b == 0) else 1
                bc = nn.BlockConfig(
                    in_channels=cin, out_channels=cout, mid_kernel=cfg.mid_kernel, stride=stride,
                    groups=cfg.groups, use_se=cfg.use_se, se_reduction=cfg.se_reduction,
                    survive_prob=cfg.survive_prob, activation=cfg.activation,
                )
                self.blocks.append(self.add(f"stage{s}.block{b}", nn.Bottleneck(bc)))
                cin = cout
        self.head = self.add("head", nn.Linear(cin, cfg.out_nodes))

    def features(self, x, mode, rng):
        h = nn.activation(self.stem_gn(self.stem(x)), self.config.activation)
        for block in self.blocks:
            h = block(h, mode, rng)
        return h

    def pre_head(self, pooled, mode, rng):
        return nn.dropout(pooled, self.config.dropout_rate, mode, rng)

    def flops(self, size):
        total, h, w = self.stem.flops(size, size)
        for block in self.blocks:
            macs, h, w = block.flops(h, w)
            total += macs
        return float(total + self.head.flops(1, 1)[0])

    def blob(self):
        return {"arch": self.arch, **self.config.to_dict()}


class BasicBlock(nn.Module):
    """Two 3x3 convs with normalization and a (projected) identity shortcut."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = self.add("conv1", nn.Conv2d(cin, cout, 3, stride))
        self.bn1 = self.add("bn1", _channel_norm(cout))
        self.conv2 = self.add("conv2", nn.Conv2d(cout, cout, 3))
        self.bn2 = self.add("bn2", _channel_norm(cout))
        self.down = self.down_norm = None
        if stride != 1 or cin != cout:
            self.down = self.add("downsample", nn.Conv2d(cin, cout, 1, stride, padding=0))
            self.down_norm = self.add("downsample_norm", _channel_norm(cout))

    def forward(self, x, mode="eval", rng=None):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        sc = x if self.down is None else self.down_norm(self.down(x))
        return ops.relu(h + sc)

    def flops(self, h, w):
        m1, ho, wo = self.conv1.flops(h, w)
        m2, ho, wo = self.conv2.flops(ho, wo)
        m3 = self.down.flops(h, w)[0] if self.down is not None else 0
        return m1 + m2 + m3, ho, wo


def _channel_norm(c: int) -> nn.GroupNorm:
    # per-channel scale+shift like batch norm; groups only affect the statistics
    return nn.GroupNorm(c, min(32, c))


class ResNet18(Model):
    arch = "resnet18"

    def __init__(self, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.conv1 = self.add("conv1", nn.Conv2d(3, 64, 7, stride=2, padding=3))
        self.bn1 = self.add("bn1", _channel_norm(64))
        self.blocks: list[BasicBlock] = []
        cin = 64
        for s, cout in enumerate((64, 128, 256, 512)):
            for b in range(2):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(self.add(f"layer{s + 1}.{b}", BasicBlock(cin, cout, stride)))
                cin = cout
        self.head = self.add("fc", nn.Linear(512, num_classes))

    def features(self, x, mode, rng):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = ops.pool(h, "max", 3, 2, padding=1)
        for block in self.blocks:
            h = block(h, mode, rng)
        return h

    def flops(self, size):
        total, h, w = self.conv1.flops(size, size)
        h = ops.conv_out_size(h, 3, 2, 1)
        w = ops.conv_out_size(w, 3, 2, 1)
        for block in self.blocks:
            macs, h, w = block.flops(h, w)
            total += macs
        return float(total + self.head.flops(1, 1)[0])

    def blob(self):
        return {"arch": self.arch, "num_classes": self.num_classes}


def build_model(cfg: ModelConfig, seed: int = 42) -> PhytNet:
    """Build and initialize a PhytNet from ``cfg``; equal seeds give equal weights."""
    model = PhytNet(cfg)
    model.reset_parameters(seed)
    return model


def build_resnet18_reference(num_classes: int = 4, seed: int = 42) -> ResNet18:
    model = ResNet18(num_classes)
    model.reset_parameters(seed)
    return model


def count_params(m: nn.Module) -> int:
    return int(sum(t.size for t in m.named_parameters().values()))


def count_flops(m: Model, input_size: int) -> float:
    """Multiply-accumulates of one forward pass on a square RGB image (conv + linear only)."""
    if input_size < 1:
        raise ConfigurationError(f"input size {input_size} collapses the network")
    return m.flops(int(input_size))


@dataclass(frozen=True)
class CostReport:
    n_params: int
    flops: float
    input_size: int

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def cost_report(m: Model, input_size: int | None = None) -> CostReport:
    if input_size is None:
        if m.config is None:
            raise ConfigurationError("input_size is required for models without a config")
        input_size = m.config.input_size
    return CostReport(count_params(m), count_flops(m, input_size), int(input_size))


def forward(m: Model, batch, mode: str = "eval", rng=None) -> Tensor:
    """Logits ``[N, out_nodes]`` for a ``[N, 3, S, S]`` batch."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise DataError(f"expected a [N, 3, S, S] batch, got {batch.shape}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.shape[0] == 0:
        return Tensor(np.zeros((0, m.out_nodes), dtype=np.float32))
    return m.forward(batch, mode, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"PHYT"
FORMAT_VERSION = 1


def model_from_blob(blob: dict, seed: int = 0) -> Model:
    blob = dict(blob)
    arch = blob.pop("arch", "phytnet")
    if arch == "phytnet":
        return build_model(ModelConfig.from_dict(blob), seed)
    if arch == "resnet18":
        return build_resnet18_reference(int(blob["num_classes"]), seed)
    raise DataError(f"unknown architecture {arch!r} in checkpoint")


def save_checkpoint(m: Model, path) -> None:
    """Write ``m`` as: magic, u16 version, u32 config length + JSON, parameter records.

    Each record is u16 name length, name bytes, u8 rank, u32 dims, then raw
    little-endian float32 values. All integers are little-endian.
    """
    blob = json.dumps(m.blob(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(blob)), blob]
    for name, t in m.named_parameters().items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a PhytNet checkpoint (bad magic)")
    version, blen = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    blob = json.loads(buf[pos : pos + blen])
    pos += blen
    model = model_from_blob(blob)
    params = model.named_parameters()
    seen = set()
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name not in params or params[name].shape != tuple(dims):
            raise DataError(f"{path}: parameter {name!r} {dims} does not match the configured model")
        params[name].data = arr.astype(np.float32)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise DataError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return model
