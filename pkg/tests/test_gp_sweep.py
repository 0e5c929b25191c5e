import math

import numpy as np
import pytest
from scipy.stats import norm

from phytnet import arch
from phytnet.errors import ConfigurationError, NumericalError
from phytnet.gp import expected_improvement, gp_fit, gp_posterior
from phytnet.sweep import (BoxSpace, SweepSpace, constraint_gate, gate_verdict, propose_next, read_log, run_sweep,
                           sample_space)


def dense_posterior(gp, xq):
    """Textbook GP conditional with an explicit matrix inverse and a double-loop kernel."""

    def k(a, b):
        out = np.empty((len(a), len(b)))
        for i, u in enumerate(a):
            for j, v in enumerate(b):
                out[i, j] = gp.signal_var * math.exp(-0.5 * np.sum(((u - v) / gp.lengthscales) ** 2))
        return out

    z = (gp.y - gp.y_mean) / gp.y_std
    kinv = np.linalg.inv(k(gp.x, gp.x) + (gp.noise_var + gp.jitter) * np.eye(len(gp.x)))
    ks = k(xq, gp.x)
    mu = ks @ kinv @ z
    var = gp.signal_var - np.einsum("ij,jk,ik->i", ks, kinv, ks)
    return gp.y_mean + gp.y_std * mu, gp.y_std * np.sqrt(np.maximum(var, 0))


# -- GP ------------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_posterior_matches_dense_oracle(seed):
    r = np.random.default_rng(seed)
    x = r.random((12, 3))
    y = np.sin(4 * x[:, 0]) + x[:, 1] ** 2 + 0.05 * r.normal(size=12)
    gp = gp_fit(x, y, 1e-4, seed=seed)
    xq = r.random((10, 3))
    mu, sd = gp.posterior(xq)
    mu_o, sd_o = dense_posterior(gp, xq)
    assert np.abs(mu - mu_o).max() < 1e-6
    assert np.abs(sd - sd_o).max() < 1e-6


def test_single_observation_interpolates():
    gp = gp_fit([[0.3, 0.4]], [0.7], noise=0.0)
    mu, sd = gp_posterior(gp, [0.3, 0.4])
    assert abs(mu - 0.7) < 1e-12 and sd < 1e-6


def test_duplicate_inputs_shrink_toward_mean():
    gp = gp_fit([[0.5], [0.5]], [0.2, 0.8], noise=0.1, optimize_hypers=False)
    mu, _ = gp_posterior(gp, [0.5])
    assert 0.2 < mu < 0.8


def test_zero_noise_training_points_have_no_uncertainty(rng):
    x = np.array([[0.1, 0.1], [0.9, 0.2], [0.5, 0.8], [0.2, 0.6]])
    gp = gp_fit(x, rng.random(4), noise=0.0, optimize_hypers=False, lengthscales=0.3)
    assert gp.jitter == 0.0
    _, sd = gp.posterior(x)
    assert sd.max() < 1e-6


def test_far_queries_revert_to_prior(rng):
    x = rng.random((8, 2))
    gp = gp_fit(x, rng.random(8), 1e-4, seed=1)
    mu, sd = gp_posterior(gp, [50.0, -50.0])
    assert abs(mu - gp.y_mean) <= 0.01 * gp.y_std
    assert abs(sd - gp.prior_sd) <= 0.01 * gp.prior_sd


def test_posterior_variance_never_exceeds_prior(rng):
    x = rng.random((15, 2))
    gp = gp_fit(x, rng.normal(size=15), 1e-3, seed=2)
    grid = np.stack(np.meshgrid(np.linspace(-0.5, 1.5, 30), np.linspace(-0.5, 1.5, 30)), -1).reshape(-1, 2)
    _, sd = gp.posterior(grid)
    assert np.all(sd**2 <= gp.prior_sd**2 + 1e-9)


def test_jitter_escalates_for_duplicates():
    gp = gp_fit([[0.5], [0.5]], [0.1, 0.1], noise=0.0, optimize_hypers=False)
    assert gp.jitter > 0


def test_indefinite_kernel_raises():
    with pytest.raises(NumericalError):
        gp_fit([[0.1], [0.9]], [0.0, 1.0], noise=0.0, optimize_hypers=False, signal_var=-1.0)


# -- expected improvement ------------------------------------------------------------------


def test_ei_examples():
    assert expected_improvement(0.3, 0.0, 0.5) == 0.0
    assert expected_improvement(0.9, 0.0, 0.5) == pytest.approx(0.4, abs=1e-15)
    assert abs(expected_improvement(0.0, 1.0, 0.0) - 1 / math.sqrt(2 * math.pi)) < 1e-12
    assert abs(expected_improvement(0.0, 1.0, 0.0) - 0.3989) < 1e-4


def test_ei_monte_carlo_oracle():
    draws = np.random.default_rng(0).normal(1.0, 1.0, 1_000_000)
    gains = np.maximum(draws, 0.0)
    se = gains.std() / math.sqrt(len(gains))
    ei = expected_improvement(1.0, 1.0, 0.0)
    assert abs(ei - gains.mean()) < 3 * se
    assert abs(ei - 1.0833) < 1e-4


def test_ei_nonnegative_and_increasing_in_sigma():
    sigmas = np.linspace(0.0, 3.0, 61)
    for mu in np.linspace(-2.0, 0.0, 9):
        ei = expected_improvement(np.full_like(sigmas, mu), sigmas, 0.0)
        assert np.all(ei >= 0)
        assert np.all(np.diff(ei) >= 0)
    assert np.all(expected_improvement(np.linspace(-3, 3, 50), np.full(50, 0.7), 0.2) >= 0)


# -- search space ---------------------------------------------------------------------------


def test_samples_stay_in_bounds():
    space = SweepSpace()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = sample_space(space, rng)
        assert p["mid_kernel"] % 2 == 1 and 1 <= p["mid_kernel"] <= 19
        assert 16 <= p["channels"] <= 128 and p["channels"] % 4 == 0
        assert 1 <= p["blocks_per_stage"] <= 4 and 200 <= p["input_size"] <= 500
        assert 4 <= p["out_nodes"] <= 10
        assert 1e-6 <= p["lr"] <= 1e-3 and 0.88 <= p["beta1"] <= 0.99 and 0.93 <= p["beta2"] <= 0.999
        u = space.encode(p)
        assert np.all((u >= 0) & (u <= 1))
        assert space.decode(u) == pytest.approx(p)


def test_lr_is_log_uniform():
    rng = np.random.default_rng(1)
    lr = np.array([SweepSpace().sample(rng)["lr"] for _ in range(6000)])
    low = np.mean((lr >= 1e-6) & (lr < 1e-5))
    high = np.mean((lr >= 1e-4) & (lr <= 1e-3))
    se = math.sqrt(2 * (1 / 3) * (2 / 3) / len(lr))
    assert abs(low - high) < 4 * se
    assert abs(low - 1 / 3) < 4 * math.sqrt((1 / 3) * (2 / 3) / len(lr))


def test_sampling_is_seeded():
    a = [SweepSpace().sample(np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_bounds_outside_default_need_override(tmp_path):
    with pytest.raises(ConfigurationError, match="override"):
        SweepSpace(lr=(1e-7, 1e-3))
    assert SweepSpace(lr=(1e-7, 1e-3), override=True).lr == (1e-7, 1e-3)
    SweepSpace(channels=(32, 64))
    with pytest.raises(ConfigurationError, match="depth"):
        SweepSpace.from_dict({"depth": [1, 2]})
    space = SweepSpace(mid_kernel=(3, 7))
    assert SweepSpace.from_dict(space.to_dict()) == space


def test_sampled_points_build_valid_models():
    space = SweepSpace()
    rng = np.random.default_rng(3)
    for _ in range(30):
        cfg = space.model_config(space.sample(rng))
        cfg.validate()
        assert cfg.groups >= 1 and len(cfg.stage_channels) == 4


# -- gate ----------------------------------------------------------------------------------------


def test_gate_examples():
    assert gate_verdict(336_196, 1.19).passed
    assert gate_verdict(2_000_000, 6.0).passed
    assert gate_verdict(2_000_001, 1.0).reasons == ("params",)
    assert gate_verdict(100, 6.01).reasons == ("gflops",)
    m = arch.build_resnet18_reference(4)
    v = gate_verdict(arch.count_params(m), arch.count_flops(m, 408) / 1e9)
    assert not v.passed and v.reasons == ("params", "gflops")


def test_gate_on_points_matches_counters():
    space = SweepSpace()
    rng = np.random.default_rng(4)
    for _ in range(50):
        p = space.sample(rng)
        cfg = space.model_config(p)
        m = arch.PhytNet(cfg)
        n, g = arch.count_params(m), arch.count_flops(m, cfg.input_size) / 1e9
        assert constraint_gate(p, space).passed == (n <= 2_000_000 and g <= 6.0)


# -- proposals and the sweep loop ------------------------------------------------------------


def neg_branin(p):
    x1, x2 = 15 * p["x0"] - 5, 15 * p["x1"]
    b, c, t = 5.1 / (4 * math.pi**2), 5 / math.pi, 1 / (8 * math.pi)
    return -((x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * math.cos(x1) + 10)


UNIT2 = BoxSpace([(0.0, 1.0), (0.0, 1.0)])


def test_propose_single_candidate_is_returned():
    gp = gp_fit([[0.2, 0.2], [0.8, 0.8]], [0.0, 1.0], optimize_hypers=False)
    expect = UNIT2.sample(np.random.default_rng(9))
    assert propose_next(gp, UNIT2, np.random.default_rng(9), 1) == expect


def test_propose_finds_the_optimum_region():
    x = np.array([[0.1, 0.1], [0.1, 0.9], [0.9, 0.1], [0.5, 0.5], [0.8, 0.8], [0.9, 0.9]])
    y = -np.sum((x - 0.85) ** 2, axis=1)
    gp = gp_fit(x, y, 1e-6, optimize_hypers=False, lengthscales=0.3)
    for seed in range(5):
        p = propose_next(gp, UNIT2, np.random.default_rng(seed), 512)
        assert abs(p["x0"] - 0.85) < 0.25 and abs(p["x1"] - 0.85) < 0.25
    a = propose_next(gp, UNIT2, np.random.default_rng(0), 64)
    assert a == propose_next(gp, UNIT2, np.random.default_rng(0), 64)


def random_best(seed, n=30):
    rng = np.random.default_rng([seed, 999])
    return max(neg_branin(UNIT2.sample(rng)) for _ in range(n))


def test_sweep_beats_random_search_on_branin():
    wins = 0
    for rep in range(10):
        baseline = np.median([random_best(1000 * rep + j) for j in range(10)])
        best = run_sweep(30, neg_branin, UNIT2, seed=rep).best.val_f1
        wins += best > baseline
    assert wins >= 8


def test_sweep_all_gated_out(tmp_path):
    huge = SweepSpace(mid_kernel=(19, 19), channels=(128, 128), blocks_per_stage=(4, 4), input_size=(500, 500))
    calls = []
    result = run_sweep(5, calls.append, huge, init_random=5, log_path=tmp_path / "t.jsonl")
    assert result.best is None and calls == []
    trials = read_log(tmp_path / "t.jsonl")
    assert [t.status for t in trials] == ["gated_out"] * 5
    assert all(t.val_f1 is None and t.reasons for t in trials)


def test_sweep_resume_reproduces_next_proposal(tmp_path):
    full = run_sweep(14, neg_branin, UNIT2, seed=3, init_random=5)
    run_sweep(12, neg_branin, UNIT2, seed=3, init_random=5, log_path=tmp_path / "t.jsonl")
    resumed = run_sweep(14, neg_branin, UNIT2, seed=3, init_random=5, log_path=tmp_path / "t.jsonl")
    assert [t.config for t in resumed.trials] == [t.config for t in full.trials]
    assert len(read_log(tmp_path / "t.jsonl")) == 14


def test_sweep_survives_evaluator_failures():
    def flaky(p):
        if p["x0"] < 0.5:
            raise RuntimeError("diverged")
        return neg_branin(p)

    result = run_sweep(12, flaky, UNIT2, seed=0, init_random=4)
    statuses = {t.status for t in result.trials}
    assert statuses == {"failed", "trained"}
    assert all("diverged" in t.error for t in result.trials if t.status == "failed")
    assert result.best.val_f1 == max(t.val_f1 for t in result.trials if t.status == "trained")


def test_sweep_budget_checks():
    with pytest.raises(ConfigurationError):
        run_sweep(3, neg_branin, UNIT2, init_random=5)
    with pytest.raises(ConfigurationError):
        run_sweep(3, neg_branin, UNIT2, init_random=0)
