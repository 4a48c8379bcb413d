"""Synthetic-data generation for the replication scenarios S0-S4 and
user-defined configurations, retaining ground truth for scoring.

Generation follows the two-class generative model: a probit class model on
a standardized covariate, class-specific linear trajectories for two
correlated outcomes with random intercepts, a probit visit process with a
patient random intercept, and a probit response process (outcome 2 only in
the shipped scenarios) at visited windows.  Outcomes are generated at every
window and masked afterwards; the pre-masking values live in the truth
block so the full-data method can consume the identical draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .data import PanelData, TruthBlock, standardize_times
from .kernels import RngStream
from .probit import class_probs_marginal

__all__ = ["GenerativeConfig", "scenario_config", "simulate_dataset", "marginal_truth", "SCENARIOS"]

SCENARIOS = ("S0", "S1", "S2", "S3", "S4")


@dataclass(frozen=True)
class GenerativeConfig:
    """True parameter values for one data-generation scenario (q = 1)."""

    n: int = 500
    J: int = 12
    delta: np.ndarray = None          # (K-1, s) class-utility coefficients
    beta: np.ndarray = None           # (R, K, 2) [intercept, slope]
    sigma: np.ndarray = None          # (K, R, R) within-window covariance
    psi: np.ndarray = None            # (K, R) random-intercept variances
    phi: np.ndarray = None            # (K, 2) visit process [intercept, slope]
    omega: np.ndarray = None          # (K,) visit random-intercept variance
    lam: np.ndarray = None            # (R, K, 2) response process coefficients
    theta: np.ndarray = None          # (R, K) response random-intercept variances
    response_modeled: tuple = (False, True)
    scenario: str = "custom"

    def __post_init__(self):
        for name in ("delta", "beta", "sigma", "psi", "phi", "omega", "lam", "theta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for k in range(self.K):
            np.linalg.cholesky(self.sigma[k])
        if np.any(self.psi < 0) or np.any(self.omega < 0) or np.any(self.theta < 0):
            raise ValueError("variance components must be nonnegative")

    @property
    def K(self):
        return self.delta.shape[0] + 1

    @property
    def R(self):
        return self.beta.shape[0]

    def to_params_dict(self):
        return {
            "delta": self.delta.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
            "psi": self.psi.tolist(),
            "phi": self.phi.tolist(),
            "omega": self.omega.tolist(),
            "lambda": self.lam.tolist(),
            "theta": self.theta.tolist(),
            "response_modeled": list(self.response_modeled),
            "scenario": self.scenario,
        }


def _s0_config():
    return GenerativeConfig(
        n=500,
        J=12,
        delta=[[0.25, 1.0]],  # class-2 probability Phi(-0.25 - w)
        beta=[
            [[-0.25, 0.1], [-1.0, 0.5]],   # outcome 1, classes 1 and 2
            [[0.5, 0.2], [-0.5, 0.75]],    # outcome 2
        ],
        sigma=[
            [[0.5, 0.2], [0.2, 0.5]],
            [[1.5, 1.0], [1.0, 1.5]],
        ],
        psi=[[0.6, 0.6], [0.6, 0.4]],      # psi[k][r]
        phi=[[-0.2, -0.8], [-0.8, 0.2]],
        omega=[0.25, 0.25],
        lam=[
            [[0.0, 0.0], [0.0, 0.0]],      # outcome 1 response not modeled
            [[1.9, 0.1], [1.1, 0.25]],
        ],
        theta=[[0.0, 0.0], [0.5, 1.5]],
        response_modeled=(False, True),
        scenario="S0",
    )


def scenario_config(scenario_id):
    """Exact true-parameter configuration for scenarios S0-S4."""
    sid = str(scenario_id).upper()
    cfg = _s0_config()
    if sid == "S0":
        return cfg
    if sid == "S1":
        beta = cfg.beta.copy()
        beta[1, 1, 1] = 1.0
        return replace(cfg, beta=beta, scenario="S1")
    if sid == "S2":
        beta = cfg.beta.copy()
        beta[1, 1, 1] = 0.3
        return replace(cfg, beta=beta, scenario="S2")
    if sid == "S3":
        return replace(cfg, phi=np.array([[0.4, -0.2], [-0.1, 0.9]]), scenario="S3")
    if sid == "S4":
        lam = cfg.lam.copy()
        lam[1, 0] = [0.8, 0.1]
        lam[1, 1] = [0.5, 0.2]
        return replace(cfg, lam=lam, scenario="S4")
    raise ValueError(f"unknown scenario '{scenario_id}'; expected one of {SCENARIOS}")


def _draw_classes(cfg, w_cov, rng):
    """0-based class labels from the latent-utility probit model."""
    n = w_cov.shape[0]
    K = cfg.K
    if K == 1:
        return np.zeros(n, dtype=np.int64)
    mu = w_cov @ cfg.delta.T                       # (n, K-1)
    xi = mu + rng.generator.standard_normal(mu.shape)
    best = np.argmax(xi, axis=1)
    c = np.where(xi[np.arange(n), best] >= 0.0, best, K - 1)
    return c


def simulate_dataset(cfg, n=None, seed=0, rng=None):
    """Generate one dataset; returns PanelData carrying its TruthBlock."""
    if rng is None:
        rng = RngStream(seed, 902_001)
    n = cfg.n if n is None else int(n)
    J, R, K = cfg.J, cfg.R, cfg.K

    w_val = rng.generator.standard_normal(n)
    w_cov = np.column_stack([np.ones(n), w_val])
    u_cov = np.ones((n, 1))
    c = _draw_classes(cfg, w_cov, rng)

    t_raw = np.broadcast_to(np.arange(1.0, J + 1.0), (n, J)).copy()
    ts, _, _ = standardize_times(t_raw)

    # random intercepts and outcomes at every window (mask later)
    psi_c = cfg.psi[c]                              # (n, R)
    b = np.sqrt(psi_c) * rng.generator.standard_normal((n, R))
    mean = (cfg.beta[:, c, 0].T[:, None, :]
            + cfg.beta[:, c, 1].T[:, None, :] * ts[:, :, None]
            + b[:, None, :])                        # (n, J, R)
    chol = np.linalg.cholesky(cfg.sigma)            # (K, R, R)
    noise = rng.generator.standard_normal((n, J, R))
    y_full = mean + np.einsum("nrs,njs->njr", chol[c], noise)

    # visit process
    tau = np.sqrt(cfg.omega[c]) * rng.generator.standard_normal(n)
    lin_d = cfg.phi[c, 0][:, None] + cfg.phi[c, 1][:, None] * ts + tau[:, None]
    d = (rng.generator.random((n, J)) < ndtr(lin_d)).astype(np.int8)

    # response process given a visit
    m = np.zeros((n, J, R), dtype=np.int8)
    for r in range(R):
        if cfg.response_modeled[r]:
            kap = np.sqrt(cfg.theta[r, c]) * rng.generator.standard_normal(n)
            lin_m = cfg.lam[r, c, 0][:, None] + cfg.lam[r, c, 1][:, None] * ts + kap[:, None]
            m[:, :, r] = (rng.generator.random((n, J)) < ndtr(lin_m)).astype(np.int8)
        else:
            m[:, :, r] = 1
    m &= d[:, :, None]

    observed = (d[:, :, None] == 1) & (m == 1)
    y = np.where(observed, y_full, np.nan)

    # scoring truth uses a fixed stream so it is identical across replications
    truth = TruthBlock(
        classes=c + 1,
        y_full=y_full,
        params=cfg.to_params_dict(),
        marginal=marginal_truth(cfg),
    )
    data = PanelData(t=t_raw, d=d, m=m, y=y, w=w_cov, u=u_cov, truth=truth)
    return data, truth


def marginal_truth(cfg, mc_draws=200_000, seed=0):
    """True marginal intercepts and slopes: class-specific coefficients
    averaged over the reporting-convention class probabilities, Monte Carlo
    over the covariate law (w standard normal, fixed stream)."""
    if mc_draws < 1e5:
        raise ValueError("mc_draws must be at least 1e5")
    rng = RngStream(seed, 903_001)
    w_val = rng.generator.standard_normal(mc_draws)
    w_cov = np.column_stack([np.ones(mc_draws), w_val])
    if cfg.K == 1:
        pbar = np.ones(1)
    else:
        pbar = class_probs_marginal(cfg.delta, w_cov).mean(axis=0)
    intercept = cfg.beta[:, :, 0] @ pbar
    slope = cfg.beta[:, :, 1] @ pbar
    return {"intercept": intercept.tolist(), "slope": slope.tolist()}
