"""Layer vocabulary: group norm, activations, squeeze-excitation, stochastic
depth, dropout and the residual bottleneck block.

The functional forms (``group_norm``, ``bottleneck_block`` ...) take explicit
parameter tensors. The :class:`Module` subclasses own named parameters and
also report their multiply-accumulate cost, which is what the architecture
counters walk.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor, make

ACTIVATIONS = ("relu", "gelu")


# ---------------------------------------------------------------------------
# functional layers
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (channels-in-group x H x W), then scale/shift per channel.

    Group statistics are accumulated in float64; the normalized map is
    applied as a single per-(sample, channel) affine ``x * scale + shift``.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"group_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group count {groups} does not divide {c} channels")
    if eps <= 0:
        raise ConfigurationError("group_norm eps must be positive")
    cg = c // groups
    m = cg * h * w
    xd = x.data
    xg = xd.reshape(n, groups, m)
    mu = xg.sum(axis=2, dtype=np.float64) / m
    xc = xg - mu[:, :, None].astype(xd.dtype)
    # two-pass variance on the centred values
    var = np.square(xc).sum(axis=2, dtype=np.float64) / m
    inv_std = 1.0 / np.sqrt(var + eps)  # (n, g) float64
    inv_c = np.repeat(inv_std, cg, axis=1)  # (n, c)
    g64 = gamma.data.astype(np.float64)
    scale = (inv_c * g64).astype(xd.dtype)
    y = xc.reshape(n, c, h * w) * scale[:, :, None]
    y += beta.data.astype(xd.dtype)[None, :, None]
    y = y.reshape(x.shape)

    def bw(gy):
        gy3 = gy.reshape(n, c, h * w)
        xhat = xc.reshape(n, c, h * w) * inv_c.astype(xd.dtype)[:, :, None]
        s1 = gy3.sum(axis=2, dtype=np.float64)  # (n, c)
        s2 = (gy3 * xhat).sum(axis=2, dtype=np.float64)
        ggamma = s2.sum(axis=0).astype(gamma.dtype)
        gbeta = s1.sum(axis=0).astype(beta.dtype)
        gx = None
        if x.requires_grad:
            m1 = (s1 * g64).reshape(n, groups, cg).sum(axis=2) / m  # mean of dxhat per group
            m2 = (s2 * g64).reshape(n, groups, cg).sum(axis=2) / m  # mean of dxhat * xhat
            a = scale[:, :, None]
            b = np.repeat(inv_std * m2, cg, axis=1).astype(xd.dtype)[:, :, None]
            cterm = np.repeat(inv_std * m1, cg, axis=1).astype(xd.dtype)[:, :, None]
            gx = gy3 * a
            gx -= xhat * b
            gx -= cterm
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return make(y, (x, gamma, beta), bw, "group_norm")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ops.relu(x)
    if kind == "gelu":
        return ops.gelu(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def squeeze_excitation(x: Tensor, reduction: int, params: dict, act: str = "relu") -> Tensor:
    """Scale channels of ``x`` by ``sigmoid(W2 act(W1 GAP(x) + b1) + b2)``.

    ``params`` holds ``w1 [C/r, C]``, ``b1``, ``w2 [C, C/r]``, ``b2``.
    """
    n, c = x.shape[:2]
    if reduction < 1 or reduction > c:
        raise ConfigurationError(f"SE reduction {reduction} must lie in [1, {c}]")
    s = ops.global_avg_pool(x).reshape(n, c)
    z = activation(ops.linear(s, params["w1"], params["b1"]), act)
    gate = ops.sigmoid(ops.linear(z, params["w2"], params["b2"]))
    return x * gate.reshape(n, c, 1, 1)


def stochastic_depth(branch: Tensor, survive_prob: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Drop the residual branch per sample with probability ``1 - survive_prob``.

    Survivors are scaled by ``1 / survive_prob`` so eval mode is the identity.
    """
    if not 0.0 < survive_prob <= 1.0:
        raise ConfigurationError(f"survive_prob must lie in (0, 1], got {survive_prob}")
    if mode == "eval" or survive_prob == 1.0:
        return branch
    _require_rng(rng, "stochastic_depth")
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
    keep = (rng.random(shape) < survive_prob).astype(branch.dtype) / branch.dtype.type(survive_prob)
    return branch * Tensor(keep)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    _require_rng(rng, "dropout")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * Tensor(keep)


def _require_rng(rng, who: str) -> None:
    if rng is None:
        raise ConfigurationError(f"{who} in train mode needs an explicit random generator")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    """Container of named parameters and child modules.

    Subclasses implement ``forward(x, mode, rng)`` and
    ``flops(h, w) -> (macs, h_out, w_out)``.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._init: dict[str, tuple[str, int]] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, shape: tuple[int, ...], init: str, fan_in: int = 1) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        self._init[name] = (init, fan_in)
        return t

    def add(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def _named_inits(self, prefix: str = "") -> dict[str, tuple[str, int]]:
        out = {prefix + k: v for k, v in self._init.items()}
        for cname, child in self._children.items():
            out.update(child._named_inits(f"{prefix}{cname}."))
        return out

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

        Each tensor draws from a generator keyed on (seed, parameter name), so a
        parameter's initial value does not depend on what else is in the model.
        """
        inits = self._named_inits()
        for name, t in self.named_parameters().items():
            kind, fan_in = inits[name]
            if kind == "ones":
                t.data[...] = 1.0
            elif kind == "zeros":
                t.data[...] = 0.0
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                bound = 1.0 / np.sqrt(fan_in)
                t.data[...] = rng.uniform(-bound, bound, size=t.shape)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for t in self.named_parameters().values():
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        return self.forward(x, mode, rng)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None, bias: bool = False):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        fan_in = cin * k * k
        self.weight = self.param("weight", (cout, cin, k, k), "fan_in", fan_in)
        self.bias = self.param("bias", (cout,), "fan_in", fan_in) if bias else None

    def forward(self, x, mode="eval", rng=None):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def flops(self, h, w):
        ho = ops.conv_out_size(h, self.k, self.stride, self.padding)
        wo = ops.conv_out_size(w, self.k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"spatial size collapses to {ho}x{wo} at a {self.k}x{self.k} conv")
        return self.k * self.k * self.cin * self.cout * ho * wo, ho, wo


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ConfigurationError(f"group count {groups} does not divide {channels} channels")
        self.groups, self.eps = groups, eps
        self.gamma = self.param("gamma", (channels,), "ones")
        self.beta = self.param("beta", (channels,), "zeros")

    def forward(self, x, mode="eval", rng=None):
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)

    def flops(self, h, w):
        return 0, h, w


class Linear(Module):
    def __init__(self, din: int, dout: int):
        super().__init__()
        self.din, self.dout = din, dout
        self.weight = self.param("weight", (dout, din), "fan_in", din)
        self.bias = self.param("bias", (dout,), "fan_in", din)

    def forward(self, x, mode="eval", rng=None):
        return ops.linear(x, self.weight, self.bias)

    def flops(self, h, w):
        return self.din * self.dout, h, w


class SqueezeExcitation(Module):
    def __init__(self, channels: int, reduction: int, act: str):
        super().__init__()
        if reduction < 1 or reduction > channels:
            raise ConfigurationError(f"SE reduction {reduction} must lie in [1, {channels}]")
        hidden = max(1, channels // reduction)
        self.reduction, self.act = reduction, act
        self.fc1 = self.add("fc1", Linear(channels, hidden))
        self.fc2 = self.add("fc2", Linear(hidden, channels))

    def params_dict(self) -> dict:
        return {"w1": self.fc1.weight, "b1": self.fc1.bias, "w2": self.fc2.weight, "b2": self.fc2.bias}

    def forward(self, x, mode="eval", rng=None):
        return squeeze_excitation(x, self.reduction, self.params_dict(), self.act)

    def flops(self, h, w):
        return self.fc1.flops(1, 1)[0] + self.fc2.flops(1, 1)[0], h, w


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    mid_kernel: int = 3
    stride: int = 1
    groups: int = 8
    use_se: bool = False
    se_reduction: int = 4
    survive_prob: float = 1.0
    activation: str = "gelu"

    @property
    def mid_channels(self) -> int:
        return max(1, self.out_channels // 4)

    def validate(self) -> None:
        k = self.mid_kernel
        if not (1 <= k <= 19 and k % 2 == 1):
            raise ConfigurationError(f"mid_kernel must be odd in [1, 19], got {k}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        for name, c in (("out_channels", self.out_channels), ("mid_channels", self.mid_channels)):
            if self.groups < 1 or c % self.groups:
                raise ConfigurationError(f"groups={self.groups} does not divide {name}={c}")
        if not 0.0 < self.survive_prob <= 1.0:
            raise ConfigurationError(f"survive_prob must lie in (0, 1], got {self.survive_prob}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.use_se and not 1 <= self.se_reduction <= self.out_channels:
            raise ConfigurationError(f"se_reduction must lie in [1, {self.out_channels}]")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


class Bottleneck(Module):
    """1x1 reduce -> GN -> act -> kxk -> GN -> act -> 1x1 expand -> GN [-> SE] -> drop-path, plus shortcut."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        mid = cfg.mid_channels
        self.conv1 = self.add("conv1", Conv2d(cfg.in_channels, mid, 1))
        self.gn1 = self.add("gn1", GroupNorm(mid, cfg.groups))
        self.conv2 = self.add("conv2", Conv2d(mid, mid, cfg.mid_kernel, cfg.stride))
        self.gn2 = self.add("gn2", GroupNorm(mid, cfg.groups))
        self.conv3 = self.add("conv3", Conv2d(mid, cfg.out_channels, 1))
        self.gn3 = self.add("gn3", GroupNorm(cfg.out_channels, cfg.groups))
        self.se = self.add("se", SqueezeExcitation(cfg.out_channels, cfg.se_reduction, cfg.activation)) if cfg.use_se else None
        if cfg.needs_projection:
            self.proj = self.add("proj", Conv2d(cfg.in_channels, cfg.out_channels, 1, cfg.stride, padding=0))
            self.proj_gn = self.add("proj_gn", GroupNorm(cfg.out_channels, cfg.groups))
        else:
            self.proj = self.proj_gn = None

    def params_dict(self) -> dict:
        return {name: t for name, t in self.named_parameters().items()}

    def forward(self, x, mode="eval", rng=None):
        return bottleneck_block(x, self.cfg, self.params_dict(), mode, rng)

    def flops(self, h, w):
        total = 0
        hh, ww = h, w
        for conv in (self.conv1, self.conv2, self.conv3):
            macs, hh, ww = conv.flops(hh, ww)
            total += macs
        if self.se is not None:
            total += self.se.flops(hh, ww)[0]
        if self.proj is not None:
            total += self.proj.flops(h, w)[0]
        return total, hh, ww


def bottleneck_block(x: Tensor, cfg: BlockConfig, params: dict, mode: str = "eval", rng=None) -> Tensor:
    """Residual bottleneck block over a flat parameter dict.

    Keys follow :class:`Bottleneck` naming: ``conv1.weight``, ``gn1.gamma`` ...,
    ``se.fc1.weight`` when SE is on, ``proj.weight``/``proj_gn.*`` when the
    shortcut needs a projection.
    """
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigurationError(f"block expects {cfg.in_channels} input channels, got shape {x.shape}")
    k, act, g = cfg.mid_kernel, cfg.activation, cfg.groups
    p = params
    h = ops.conv2d(x, p["conv1.weight"])
    h = activation(group_norm(h, g, p["gn1.gamma"], p["gn1.beta"]), act)
    h = ops.conv2d(h, p["conv2.weight"], stride=cfg.stride, padding=k // 2)
    h = activation(group_norm(h, g, p["gn2.gamma"], p["gn2.beta"]), act)
    h = ops.conv2d(h, p["conv3.weight"])
    h = group_norm(h, g, p["gn3.gamma"], p["gn3.beta"])
    if cfg.use_se:
        se = {"w1": p["se.fc1.weight"], "b1": p["se.fc1.bias"], "w2": p["se.fc2.weight"], "b2": p["se.fc2.bias"]}
        h = squeeze_excitation(h, cfg.se_reduction, se, act)
    h = stochastic_depth(h, cfg.survive_prob, mode, rng)
    if cfg.needs_projection:
        sc = ops.conv2d(x, p["proj.weight"], stride=cfg.stride)
        sc = group_norm(sc, g, p["proj_gn.gamma"], p["proj_gn.beta"])
    else:
        sc = x
    return activation(h + sc, act)
