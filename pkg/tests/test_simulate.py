import numpy as np
import pytest
from scipy.special import ndtr

from gmmiss.data import panel_equal, save_panel_csv, load_panel_csv
from gmmiss.probit import class_probs_conditional, class_probs_marginal
from gmmiss.simulate import GenerativeConfig, marginal_truth, scenario_config, simulate_dataset


def test_scenario_values():
    s0 = scenario_config("S0")
    assert s0.beta[1, 1, 1] == pytest.approx(0.75)
    assert np.allclose(s0.sigma[1], [[1.5, 1.0], [1.0, 1.5]])
    assert np.allclose(s0.phi[0], [-0.2, -0.8])
    assert np.allclose(s0.lam[1, 0], [1.9, 0.1])
    assert s0.theta[1, 1] == pytest.approx(1.5)

    s1 = scenario_config("S1")
    assert s1.beta[1, 1, 1] == pytest.approx(1.0)
    mask = np.ones_like(s0.beta, dtype=bool)
    mask[1, 1, 1] = False
    assert np.array_equal(s1.beta[mask], s0.beta[mask])
    assert np.array_equal(s1.phi, s0.phi) and np.array_equal(s1.lam, s0.lam)

    assert scenario_config("S2").beta[1, 1, 1] == pytest.approx(0.3)
    assert np.allclose(scenario_config("S3").phi[0], [0.4, -0.2])
    assert np.allclose(scenario_config("S4").lam[1, 1], [0.5, 0.2])
    with pytest.raises(ValueError):
        scenario_config("S9")


def test_class_share_single_draw():
    data, truth = simulate_dataset(scenario_config("S0"), n=500, seed=11)
    share1 = np.mean(truth.classes == 1)
    assert abs(share1 - 0.60) < 0.07


def test_class_share_many_seeds():
    # multi-seed average matches the analytic generating share
    # E Phi(0.25 + w) = Phi(0.25 / sqrt(2))
    cfg = scenario_config("S0")
    shares = []
    for seed in range(100):
        data, truth = simulate_dataset(cfg, n=500, seed=seed)
        shares.append(np.mean(truth.classes == 1))
    target = ndtr(0.25 / np.sqrt(2.0))
    assert abs(np.mean(shares) - target) < 0.01


def _missing_rates(data, truth):
    c = truth.classes
    rates = {}
    for k in (1, 2):
        sel = c == k
        d = data.d[sel]
        rates[("visit", k)] = 1.0 - d.mean()
        m2 = data.m[sel, :, 1]
        rates[("resp2", k)] = 1.0 - m2[d == 1].mean()
    return rates


def test_s0_missingness_rates():
    cfg = scenario_config("S0")
    acc = {}
    for seed in range(20):
        data, truth = simulate_dataset(cfg, n=500, seed=seed)
        for key, val in _missing_rates(data, truth).items():
            acc.setdefault(key, []).append(val)
    means = {key: np.mean(vals) for key, vals in acc.items()}
    assert abs(means[("visit", 1)] - 0.55) < 0.07
    assert abs(means[("visit", 2)] - 0.70) < 0.07
    assert abs(means[("resp2", 1)] - 0.10) < 0.05
    assert abs(means[("resp2", 2)] - 0.20) < 0.05


def test_s3_missingness_rates():
    cfg = scenario_config("S3")
    acc = {}
    for seed in range(20):
        data, truth = simulate_dataset(cfg, n=500, seed=seed)
        for key, val in _missing_rates(data, truth).items():
            acc.setdefault(key, []).append(val)
    assert abs(np.mean(acc[("visit", 1)]) - 0.35) < 0.07
    assert abs(np.mean(acc[("visit", 2)]) - 0.55) < 0.07


def test_s4_missingness_rates():
    cfg = scenario_config("S4")
    acc = {}
    for seed in range(20):
        data, truth = simulate_dataset(cfg, n=500, seed=seed)
        for key, val in _missing_rates(data, truth).items():
            acc.setdefault(key, []).append(val)
    assert abs(np.mean(acc[("resp2", 1)]) - 0.25) < 0.05
    assert abs(np.mean(acc[("resp2", 2)]) - 0.35) < 0.05


def test_masking_preserves_truth():
    data, truth = simulate_dataset(scenario_config("S0"), n=200, seed=3)
    observed = (data.d[:, :, None] == 1) & (data.m == 1)
    assert np.array_equal(data.y[observed], truth.y_full[observed])
    assert np.all(np.isnan(data.y[~observed]))


def test_degenerate_missingness():
    cfg = scenario_config("S0")
    cfg2 = GenerativeConfig(
        **{**{f: getattr(cfg, f) for f in (
            "n", "J", "delta", "beta", "sigma", "psi", "omega", "theta",
            "response_modeled", "scenario")},
           "phi": np.array([[20.0, -0.8], [20.0, 0.2]]),
           "lam": np.array([[[0.0, 0.0], [0.0, 0.0]], [[20.0, 0.1], [20.0, 0.25]]])})
    data, _ = simulate_dataset(cfg2, n=300, seed=5)
    assert data.d.mean() == 1.0
    assert data.m[:, :, 1].mean() == 1.0


def test_deterministic_under_seed():
    cfg = scenario_config("S0")
    a, ta = simulate_dataset(cfg, n=100, seed=42)
    b, tb = simulate_dataset(cfg, n=100, seed=42)
    assert panel_equal(a, b)
    assert np.array_equal(ta.classes, tb.classes)
    assert np.array_equal(ta.y_full, tb.y_full)


def test_simulated_csv_roundtrip(tmp_path):
    data, _ = simulate_dataset(scenario_config("S0"), n=50, seed=9)
    path = tmp_path / "sim.csv"
    save_panel_csv(data, path)
    loaded = load_panel_csv(path)
    assert panel_equal(data, loaded)


def test_full_data_view():
    data, truth = simulate_dataset(scenario_config("S0"), n=80, seed=1)
    full = data.unmasked()
    assert full.d.all() and full.m.all()
    assert np.array_equal(full.y, truth.y_full)


def test_marginal_truth_weighted_average():
    # w-coefficient zero and intercept chosen so pi_1 = 0.6, with
    # intercepts (-0.25, -1): weighted average is -0.55
    from scipy.special import ndtri

    cfg = scenario_config("S0")
    delta0 = np.sqrt(2.0) * ndtri(0.6)
    cfg2 = GenerativeConfig(
        **{**{f: getattr(cfg, f) for f in (
            "n", "J", "beta", "sigma", "psi", "phi", "omega", "lam", "theta",
            "response_modeled", "scenario")},
           "delta": np.array([[delta0, 0.0]])})
    got = marginal_truth(cfg2)
    assert got["intercept"][0] == pytest.approx(-0.55, abs=1e-3)


def test_marginal_truth_s0_matches_reported():
    mt = marginal_truth(scenario_config("S0"))
    assert mt["intercept"][0] == pytest.approx(-0.582, abs=0.01)
    assert mt["slope"][1] == pytest.approx(0.444, abs=0.01)


def test_marginal_truth_s1_matches_reported():
    mt = marginal_truth(scenario_config("S1"))
    assert mt["slope"][1] == pytest.approx(0.554, abs=0.01)


def test_marginal_truth_requires_enough_draws():
    with pytest.raises(ValueError):
        marginal_truth(scenario_config("S0"), mc_draws=1000)


def test_class_probs_k2_closed_forms():
    w = np.column_stack([np.ones(5), np.linspace(-2, 2, 5)])
    delta = np.array([[0.25, 1.0]])
    cond = class_probs_conditional(delta, w)
    assert np.allclose(cond[:, 0], ndtr(0.25 + w[:, 1]))
    marg = class_probs_marginal(delta, w)
    assert np.allclose(marg[:, 0], ndtr((0.25 + w[:, 1]) / np.sqrt(2)))
    assert np.allclose(cond.sum(axis=1), 1.0)


def test_class_probs_k3_quadrature_vs_mc():
    rng = np.random.default_rng(0)
    delta = np.array([[0.3, 0.5], [-0.2, 0.8]])
    w = np.column_stack([np.ones(4), np.linspace(-1, 1, 4)])
    probs = class_probs_conditional(delta, w)
    mu = w @ delta.T
    draws = mu[:, None, :] + rng.standard_normal((4, 400_000, 2))
    best = np.argmax(draws, axis=2)
    pos = np.take_along_axis(draws, best[:, :, None], axis=2)[:, :, 0] >= 0
    mc = np.stack([
        np.mean((best == 0) & pos, axis=1),
        np.mean((best == 1) & pos, axis=1),
        np.mean(~pos, axis=1),
    ], axis=1)
    assert np.max(np.abs(probs - mc)) < 0.005

    marg = class_probs_marginal(delta, w)
    raw = np.concatenate([mu, np.zeros((4, 1))], axis=1)
    draws = raw[:, None, :] + rng.standard_normal((4, 400_000, 3))
    best = np.argmax(draws, axis=2)
    mc = np.stack([np.mean(best == k, axis=1) for k in range(3)], axis=1)
    assert np.max(np.abs(marg - mc)) < 0.005
