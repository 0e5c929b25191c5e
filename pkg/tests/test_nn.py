import math

import numpy as np
import pytest
from scipy.stats import norm

from phytnet import nn, ops
from phytnet.errors import ConfigurationError
from phytnet.tensor import Tensor, backward, finite_diff_check

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def gn_pre_affine(x, groups):
    c = x.shape[1]
    return nn.group_norm(t64(x), groups, t64(np.ones(c)), t64(np.zeros(c))).data


# -- group norm ---------------------------------------------------------------


def test_group_norm_statistics_100_inputs():
    worst_mean = worst_var = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.normal(loc=r.uniform(-3, 3), scale=r.uniform(0.5, 4), size=(2, 16, 5, 5)).astype(np.float32)
        y = nn.group_norm(Tensor(x), 4, Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))).data
        g = y.astype(F64).reshape(2, 4, -1)
        worst_mean = max(worst_mean, np.abs(g.mean(-1)).max())
        # two-pass oracle for the variance the layer should have removed
        xs = x.astype(F64).reshape(2, 4, -1)
        var_in = ((xs - xs.mean(-1, keepdims=True)) ** 2).mean(-1)
        expected = var_in / (var_in + 1e-5)
        worst_var = max(worst_var, np.abs(g.var(-1) - expected).max(), np.abs(g.var(-1) - 1).max())
    assert worst_mean < 1e-5
    assert worst_var < 1e-4


def test_group_norm_groups_equal_channels_is_per_channel(rng):
    x = rng.normal(size=(3, 6, 4, 4))
    y = gn_pre_affine(x, 6)
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = np.sqrt(x.var(axis=(2, 3), keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, (x - mu) / sd, rtol=1e-10, atol=1e-12)


def test_group_norm_constant_input():
    x = Tensor(np.full((1, 4, 3, 3), 2.0, np.float32))
    ones = Tensor(np.ones(4, np.float32))
    assert np.all(nn.group_norm(x, 2, ones, Tensor(np.zeros(4, np.float32))).data == 0)
    assert np.all(nn.group_norm(x, 2, ones, Tensor(np.full(4, 5.0, np.float32))).data == 5)


def test_group_norm_bad_groups():
    with pytest.raises(ConfigurationError):
        nn.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# -- activations ----------------------------------------------------------------


def test_activation_values():
    assert nn.activation(Tensor(np.array([-2.0])), "relu").item() == 0.0
    assert nn.activation(Tensor(np.array([3.0])), "relu").item() == 3.0
    assert nn.activation(t64([0.0]), "gelu").item() == 0.0
    assert abs(nn.activation(t64([1.0]), "gelu").item() - norm.cdf(1.0)) < 1e-12
    assert abs(nn.activation(t64([1.0]), "gelu").item() - 0.8413) < 1e-4
    with pytest.raises(ConfigurationError):
        nn.activation(t64([1.0]), "tanh")


def test_gelu_matches_phi_oracle(rng):
    x = rng.uniform(-6, 6, 1000)
    np.testing.assert_allclose(ops.gelu(t64(x)).data, x * norm.cdf(x), rtol=1e-12, atol=1e-15)


def test_activation_monotonicity():
    grid = np.arange(-300, 301) / 100.0
    assert np.all(np.diff(ops.relu(t64(grid)).data) >= 0)
    g = ops.gelu(t64(grid)).data
    # GELU has its minimum at x ~ -0.7518; it is nondecreasing from there on
    right = grid >= -0.75
    assert np.all(np.diff(g[right]) >= 0)
    assert np.all(np.diff(g[grid <= -0.76]) <= 0)


# -- squeeze-excitation --------------------------------------------------------------


def test_se_zero_params_halves(rng):
    x = rng.normal(size=(2, 8, 3, 3))
    p = {"w1": t64(np.zeros((2, 8))), "b1": t64(np.zeros(2)), "w2": t64(np.zeros((8, 2))), "b2": t64(np.zeros(8))}
    y = nn.squeeze_excitation(t64(x), 4, p)
    assert y.shape == x.shape
    np.testing.assert_allclose(y.data, 0.5 * x, rtol=1e-15)


def test_se_matches_composition_oracle():
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 8, 4, 4))
        w1, b1, w2, b2 = r.normal(size=(4, 8)), r.normal(size=4), r.normal(size=(8, 4)), r.normal(size=8)
        p = {"w1": t64(w1), "b1": t64(b1), "w2": t64(w2), "b2": t64(b2)}
        y = nn.squeeze_excitation(t64(x), 2, p, "relu").data
        s = x.mean(axis=(2, 3))
        z = np.maximum(s @ w1.T + b1, 0)
        gate = 1 / (1 + np.exp(-(z @ w2.T + b2)))
        assert np.all((gate > 0) & (gate < 1))
        np.testing.assert_allclose(y, x * gate[:, :, None, None], rtol=1e-6)


def test_se_reduction_bounds():
    with pytest.raises(ConfigurationError):
        nn.squeeze_excitation(t64(np.zeros((1, 4, 2, 2))), 5, {})


# -- stochastic depth / dropout ------------------------------------------------------


def test_stochastic_depth_identities(rng):
    x = Tensor(rng.normal(size=(4, 3, 2, 2)).astype(np.float32))
    assert nn.stochastic_depth(x, 0.3, "eval", None) is x
    assert nn.stochastic_depth(x, 1.0, "train", rng) is x
    with pytest.raises(ConfigurationError):
        nn.stochastic_depth(x, 0.0, "train", rng)


def test_stochastic_depth_monte_carlo():
    rng = np.random.default_rng(42)
    branch = Tensor(np.full((10_000, 1, 1, 1), 3.0, np.float32))
    out = nn.stochastic_depth(branch, 0.8, "train", rng).data.reshape(-1)
    dropped = np.mean(out == 0)
    assert abs(dropped - 0.2) < 0.02
    np.testing.assert_allclose(out[out != 0], 3.0 / 0.8, rtol=1e-6)
    assert abs(out.mean() - 3.0) / 3.0 < 0.02


def test_dropout(rng):
    x = Tensor(np.ones((200, 500), np.float32))
    assert nn.dropout(x, 0.0, "train", rng) is x
    assert nn.dropout(x, 0.5, "eval", None) is x
    y = nn.dropout(x, 0.5, "train", np.random.default_rng(1)).data
    assert abs(np.mean(y == 0) - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ConfigurationError):
        nn.dropout(x, 0.5, "train", None)


# -- bottleneck -----------------------------------------------------------------------


def _block(cfg, seed=0, dtype=F64):
    b = nn.Bottleneck(cfg)
    b.reset_parameters(seed)
    r = np.random.default_rng(seed + 1000)
    for name, t in b.named_parameters().items():
        if name.endswith("gamma") or name.endswith("beta"):
            t.data = r.uniform(0.5, 1.5, t.shape).astype(np.float32) * (1 if name.endswith("gamma") else 0.3)
    return b.astype(dtype)


def test_block_passthrough_when_branch_is_zero(rng):
    cfg = nn.BlockConfig(8, 8, groups=2, activation="relu")
    b = _block(cfg)
    for name, t in b.named_parameters().items():
        if name.startswith("conv") or name.startswith("gn3"):
            t.data[...] = 0.0
    x = rng.normal(size=(2, 8, 5, 5))
    y = b(t64(x))
    np.testing.assert_array_equal(y.data, np.maximum(x, 0))


@pytest.mark.parametrize("size", [8, 9, 15])
def test_block_stride_two_halves(size):
    b = _block(nn.BlockConfig(8, 16, mid_kernel=5, stride=2, groups=2))
    y = b(t64(np.zeros((1, 8, size, size))))
    expect = (size - 1) // 2 + 1
    assert y.shape == (1, 16, expect, expect)
    assert y.shape[2] == math.ceil(size / 2)


def test_block_config_errors():
    for kwargs in ({"mid_kernel": 4}, {"mid_kernel": 21}, {"stride": 3}, {"groups": 3}, {"survive_prob": 0.0}):
        with pytest.raises(ConfigurationError):
            nn.Bottleneck(nn.BlockConfig(8, 8, **{"groups": 2, **kwargs}))
    b = _block(nn.BlockConfig(8, 8, groups=2))
    with pytest.raises(ConfigurationError):
        b(t64(np.zeros((1, 4, 5, 5))))


BLOCKS = [
    nn.BlockConfig(8, 8, mid_kernel=3, groups=2, use_se=True, se_reduction=2),
    nn.BlockConfig(4, 8, mid_kernel=3, stride=2, groups=2),
]


@pytest.mark.parametrize("cfg", BLOCKS, ids=["identity_se", "projection_stride2"])
def test_block_gradients_20_seeds(cfg):
    worst = 0.0
    for seed in range(20):
        b = _block(cfg, seed)
        x = t64(np.random.default_rng([seed, 3]).uniform(-1, 1, (2, cfg.in_channels, 5, 5)), grad=True)
        c = t64(np.random.default_rng([seed, 4]).uniform(-1, 1, b(x).shape))
        f = lambda _: (b(x) * c).sum()  # noqa: E731
        for name, p in [("x", x), *b.named_parameters().items()]:
            worst = max(worst, finite_diff_check(f, p, eps=1e-5))
    assert worst < 1e-3


def test_block_eval_determinism(rng):
    b = _block(nn.BlockConfig(8, 8, groups=2, survive_prob=0.5), dtype=np.float32)
    x = Tensor(rng.normal(size=(2, 8, 6, 6)).astype(np.float32))
    assert b(x, "eval").data.tobytes() == b(x, "eval").data.tobytes()


def test_block_functional_matches_module(rng):
    cfg = nn.BlockConfig(8, 16, mid_kernel=3, stride=2, groups=4, use_se=True)
    b = _block(cfg)
    x = t64(rng.normal(size=(1, 8, 6, 6)))
    np.testing.assert_array_equal(nn.bottleneck_block(x, cfg, b.params_dict()).data, b(x).data)


def test_reset_parameters_is_seeded():
    a = nn.Bottleneck(nn.BlockConfig(8, 8, groups=2))
    b = nn.Bottleneck(nn.BlockConfig(8, 8, groups=2))
    a.reset_parameters(3)
    b.reset_parameters(3)
    for (na, ta), (nb, tb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    w = a.named_parameters()["conv2.weight"].data
    assert np.abs(w).max() <= 1 / math.sqrt(2 * 9)


def test_block_backward_reaches_every_parameter(rng):
    b = _block(nn.BlockConfig(8, 16, stride=2, groups=2, use_se=True), dtype=np.float32)
    backward(b(Tensor(rng.normal(size=(2, 8, 6, 6)).astype(np.float32))).sum())
    for name, t in b.named_parameters().items():
        assert t.grad is not None and t.grad.shape == t.shape, name
