"""Blocked Gibbs sampler for the hierarchically centered shared-parameter
growth mixture model, with full / naive / mar / mnar estimation modes.

Each iteration runs, in order: the latent class-membership block (cone-
truncated utilities and probit coefficients), the longitudinal block
(class trajectories, random effects, their class means, and both
covariance families), the visit-process block and response-process blocks
(mnar only, via probit data augmentation), class reassignment from the
full posterior class probabilities, and imputation of missing responses
at visited windows.  All updates are closed-form conjugate draws; there
are no Metropolis corrections.

Internally classes are 0-based with K-1 as the reference class of the
utility model; reported class labels are 1-based.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .data import ModelSpec, PanelData, Priors, build_designs
from .kernels import (
    NotPositiveDefiniteError,
    RngStream,
    categorical_rows,
    cholesky_pd,
    inv_pd,
    mvn_logpdf,
    sample_inverse_wishart,
    sample_truncated_normal,
)
from .probit import class_probs_conditional

__all__ = [
    "McmcOptions",
    "GibbsContext",
    "GibbsState",
    "PosteriorDraws",
    "fit",
    "make_context",
    "initial_state",
    "conditional_coefficients",
    "update_class_membership",
    "update_longitudinal",
    "update_visit_process",
    "update_response_process",
    "sample_classes",
    "impute_missing_responses",
    "psrf",
]

_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class McmcOptions:
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    chains: int = 1
    seed: int = 0
    quad_nodes: int = 21
    progress: bool = False
    store_latents: bool = True

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1 or self.chains < 1:
            raise ValueError("thin and chains must be >= 1")

    @property
    def retained(self):
        return (self.iterations - self.burn_in + self.thin - 1) // self.thin


@dataclass
class GibbsContext:
    """Immutable per-fit precomputation shared by all update steps."""

    data: PanelData
    spec: ModelSpec
    priors: Priors
    designs: object
    vis: np.ndarray          # (n, J) float 0/1
    nvis: np.ndarray         # (n,)
    obs: np.ndarray          # (n, J, R) bool, observed outcome cells
    miss: np.ndarray         # (n, J, R) bool, visited but unobserved
    y0: np.ndarray           # (n, J, R) observed values, 0 elsewhere
    wtw: np.ndarray
    zz_vis: np.ndarray       # (n, q, q)
    zz_all: np.ndarray
    xx_all: np.ndarray       # (n, p, p)
    sigma_delta_inv: np.ndarray
    sigma_beta_inv: np.ndarray
    sigma_eta_inv: np.ndarray
    sigma_phi_inv: np.ndarray
    sigma_phi_inv_mu: np.ndarray
    sigma_lambda_inv: np.ndarray

    @property
    def n(self):
        return self.data.n

    @property
    def dims(self):
        spec, data = self.spec, self.data
        return dict(n=data.n, J=data.J, R=data.R, K=spec.K, p=spec.p,
                    ph=spec.ph, q=spec.q, e=data.u.shape[1], s=data.w.shape[1])


@dataclass
class GibbsState:
    """One full set of unknowns; mutated in place by the update steps."""

    delta: np.ndarray        # (K-1, s)
    xi: np.ndarray           # (n, K-1) class-utility latents
    c: np.ndarray            # (n,) 0-based class labels
    beta: np.ndarray         # (R, K, ph)
    b: np.ndarray            # (R, n, q)
    eta: np.ndarray          # (R, K, q, e)
    sigma: np.ndarray        # (K, R, R)
    psi: np.ndarray          # (K, R, q, q)
    phi: np.ndarray          # (K, p)
    tau: np.ndarray          # (n, q)
    omega: np.ndarray        # (K, q, q)
    lam: np.ndarray          # (R, K, p)
    kappa: np.ndarray        # (R, n, q)
    theta: np.ndarray        # (R, K, q, q)
    xi_d: np.ndarray         # (n, J)
    xi_m: np.ndarray         # (R, n, J), meaningful at visited cells
    y_comp: np.ndarray       # (n, J, R) completed outcomes at visited cells
    p_class: np.ndarray      # (n, K) class probabilities of the last pass
    # derived caches, refreshed alongside their sources
    prec: np.ndarray = None          # (K, R, R) Sigma inverses
    qmat: np.ndarray = None          # (K, R, R) conditional coefficients
    s2: np.ndarray = None            # (K, R) conditional residual variances
    logdet_sigma: np.ndarray = None  # (K,)
    F: np.ndarray = None             # (n, J, R) fixed-effect means (own class)
    zb: np.ndarray = None            # (n, J, R) random-effect contributions
    E: np.ndarray = None             # (n, J, R) residuals y_comp - F - zb


def conditional_coefficients(sigma):
    """Conditional-regression matrix Q (zero diagonal) and per-outcome
    conditional residual variances for one within-window covariance."""
    sigma = np.asarray(sigma, dtype=float)
    prec = inv_pd(sigma, "Sigma")
    s2 = 1.0 / np.diag(prec)
    qmat = np.eye(sigma.shape[0]) - s2[:, None] * prec
    np.fill_diagonal(qmat, 0.0)
    return qmat, s2


def _refresh_sigma_cache(state):
    K, R = state.sigma.shape[:2]
    state.prec = np.empty_like(state.sigma)
    state.qmat = np.empty_like(state.sigma)
    state.s2 = np.empty((K, R))
    state.logdet_sigma = np.empty(K)
    for k in range(K):
        chol = cholesky_pd(state.sigma[k], "Sigma_k")
        state.logdet_sigma[k] = 2.0 * np.sum(np.log(np.diag(chol)))
        qk, s2k = conditional_coefficients(state.sigma[k])
        state.prec[k] = inv_pd(state.sigma[k], "Sigma_k")
        state.qmat[k] = qk
        state.s2[k] = s2k


def _refresh_fixed(state, ctx, outcomes=None):
    """Recompute F (and E) for the given outcomes, own-class gathered."""
    rs = range(ctx.data.R) if outcomes is None else outcomes
    for r in rs:
        state.F[:, :, r] = np.einsum("njh,nh->nj", ctx.designs.xh, state.beta[r, state.c])
    state.E[...] = state.y_comp - state.F - state.zb


def _refresh_zb(state, ctx, r):
    state.zb[:, :, r] = np.einsum("njq,nq->nj", ctx.designs.z, state.b[r])
    state.E[:, :, r] = state.y_comp[:, :, r] - state.F[:, :, r] - state.zb[:, :, r]


def _batched_spd_inverse(mats):
    """Inverse of a stack of small SPD matrices; scalar fast path."""
    if mats.shape[-1] == 1:
        return 1.0 / mats
    return np.linalg.inv(mats)


def _batched_mvn_draw(prec, rhs, rng):
    """Draw x ~ MVN(prec^{-1} rhs, prec^{-1}) for stacked small precisions."""
    if prec.shape[-1] == 1:
        var = 1.0 / prec[:, 0, 0]
        mean = var * rhs[:, 0]
        return (mean + np.sqrt(var) * rng.generator.standard_normal(mean.shape))[:, None]
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    mean = np.einsum("nqp,np->nq", cov, rhs)
    chol = np.linalg.cholesky(cov)
    noise = rng.generator.standard_normal(mean.shape)
    return mean + np.einsum("nqp,np->nq", chol, noise)


def make_context(data, spec, priors):
    designs = build_designs(data, spec)
    vis = data.d.astype(float)
    obs = (data.d[:, :, None] == 1) & (data.m == 1)
    miss = (data.d[:, :, None] == 1) & (data.m == 0)
    y0 = np.where(obs, np.nan_to_num(data.y), 0.0)
    z, x = designs.z, designs.x
    return GibbsContext(
        data=data,
        spec=spec,
        priors=priors,
        designs=designs,
        vis=vis,
        nvis=vis.sum(axis=1),
        obs=obs,
        miss=miss,
        y0=y0,
        wtw=data.w.T @ data.w,
        zz_vis=np.einsum("nj,njq,njp->nqp", vis, z, z),
        zz_all=np.einsum("njq,njp->nqp", z, z),
        xx_all=np.einsum("njp,njq->npq", x, x),
        sigma_delta_inv=inv_pd(priors.sigma_delta, "Sigma_delta"),
        sigma_beta_inv=inv_pd(priors.sigma_beta, "Sigma_beta"),
        sigma_eta_inv=inv_pd(priors.sigma_eta, "Sigma_eta"),
        sigma_phi_inv=inv_pd(priors.sigma_phi, "Sigma_phi"),
        sigma_phi_inv_mu=inv_pd(priors.sigma_phi, "Sigma_phi") @ priors.mu_phi,
        sigma_lambda_inv=inv_pd(priors.sigma_lambda, "Sigma_lambda"),
    )


def _kmeans_labels(features, K):
    """Deterministic k-means-style split of per-patient outcome means."""
    n = features.shape[0]
    if K == 1 or n == 0:
        return np.zeros(n, dtype=np.int64)
    feats = features.copy()
    col_mean = np.nanmean(np.where(np.isfinite(feats), feats, np.nan), axis=0)
    col_mean = np.nan_to_num(col_mean)
    inds = ~np.isfinite(feats)
    feats[inds] = np.broadcast_to(col_mean, feats.shape)[inds]
    sd = feats.std(axis=0)
    sd[sd == 0] = 1.0
    feats = (feats - feats.mean(axis=0)) / sd
    score = feats.mean(axis=1)
    order = np.argsort(score, kind="stable")
    centers = feats[order[np.minimum(((np.arange(K) + 0.5) / K * n).astype(int), n - 1)]]
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(25):
        dist = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        for k in range(K):
            sel = new == k
            if sel.any():
                centers[k] = feats[sel].mean(axis=0)
            else:
                centers[k] = feats[dist.min(axis=1).argmax()]
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def initial_state(ctx, rng, chain=0):
    """Deterministic-given-seed initialization; chains get dispersed starts."""
    dims = ctx.dims
    n, J, R, K = dims["n"], dims["J"], dims["R"], dims["K"]
    p, ph, q, e, s = dims["p"], dims["ph"], dims["q"], dims["e"], dims["s"]
    pri = ctx.priors
    scale = 0.1 * (1.0 + chain)
    gen = rng.generator

    with np.errstate(invalid="ignore"):
        ysum = np.where(ctx.obs, ctx.y0, 0.0).sum(axis=1)
        ycnt = ctx.obs.sum(axis=1)
        feats = np.where(ycnt > 0, ysum / np.maximum(ycnt, 1), np.nan)
    c = _kmeans_labels(feats, K)

    delta = scale * gen.standard_normal((max(K - 1, 0), s)) @ cholesky_pd(pri.sigma_delta).T
    xi = np.empty((n, K - 1))
    for k in range(K - 1):
        mag = 0.5 + np.abs(gen.standard_normal(n))
        xi[:, k] = np.where(c == k, 0.5 + mag, -mag)

    beta = scale * gen.standard_normal((R, K, ph)) @ cholesky_pd(pri.sigma_beta).T if ph else np.zeros((R, K, 0))
    eta = scale * np.einsum("rkqe,ef->rkqf", gen.standard_normal((R, K, q, e)),
                            cholesky_pd(pri.sigma_eta).T)
    sigma = np.repeat(pri.s_sigma[None, :, :], K, axis=0)
    psi = np.tile(pri.s_psi, (K, R, 1, 1))
    phi = scale * gen.standard_normal((K, p)) @ cholesky_pd(pri.sigma_phi).T + pri.mu_phi
    omega = np.repeat(pri.s_omega[None, :, :], K, axis=0)
    lam = scale * gen.standard_normal((R, K, p)) @ cholesky_pd(pri.sigma_lambda).T
    theta = np.tile(pri.s_theta, (K, R, 1, 1)).reshape(R, K, q, q) if False else np.tile(pri.s_theta, (R, K, 1, 1))

    b = np.einsum("nqe,ne->rnq", np.zeros((n, q, e)), ctx.data.u) if False else np.empty((R, n, q))
    for r in range(R):
        b[r] = np.einsum("nqe,ne->nq", eta[r, c], ctx.data.u) + 0.1 * gen.standard_normal((n, q))
    tau = np.zeros((n, q))
    kappa = np.zeros((R, n, q))

    y_comp = ctx.y0.copy()
    if ctx.miss.any():
        with np.errstate(invalid="ignore"):
            col = np.where(ctx.obs, ctx.y0, np.nan)
            col_mean = np.nan_to_num(np.nanmean(col.reshape(-1, R), axis=0))
        fill = np.broadcast_to(col_mean, y_comp.shape)
        y_comp[ctx.miss] = fill[ctx.miss]

    state = GibbsState(
        delta=delta, xi=xi, c=c, beta=beta, b=b, eta=eta, sigma=sigma, psi=psi,
        phi=phi, tau=tau, omega=omega, lam=lam, kappa=kappa, theta=theta,
        xi_d=np.zeros((n, J)), xi_m=np.zeros((R, n, J)), y_comp=y_comp,
        p_class=np.full((n, K), 1.0 / K),
    )
    _refresh_sigma_cache(state)
    state.F = np.empty((n, J, R))
    state.zb = np.einsum("njq,rnq->njr", ctx.designs.z, state.b)
    state.E = np.empty((n, J, R))
    _refresh_fixed(state, ctx)

    if ctx.spec.models_visit:
        _draw_visit_latents(state, ctx, rng)
        for r in ctx.spec.modeled_outcomes:
            _draw_response_latents(state, ctx, rng, r)
    return state


def update_class_membership(state, ctx, rng):
    """Cone-truncated utility draws and probit coefficient updates."""
    K = ctx.spec.K
    if K == 1:
        return state
    w = ctx.data.w
    n = ctx.n
    for k in range(K - 1):
        mu = w @ state.delta[k]
        if K == 2:
            bound = np.zeros(n)
        else:
            others = np.delete(state.xi, k, axis=1)
            bound = np.maximum(others.max(axis=1), 0.0)
        is_k = state.c == k
        lower = np.where(is_k, bound, -np.inf)
        upper = np.where(is_k, np.inf, bound)
        if n:
            state.xi[:, k] = sample_truncated_normal(mu, 1.0, lower, upper, rng)
    v_delta = inv_pd(ctx.wtw + ctx.sigma_delta_inv, "V_delta")
    chol_v = cholesky_pd(v_delta, "V_delta")
    s = w.shape[1]
    for k in range(K - 1):
        mu = v_delta @ (w.T @ state.xi[:, k]) if n else np.zeros(s)
        state.delta[k] = mu + chol_v @ rng.generator.standard_normal(s)
    return state


def update_longitudinal(state, ctx, rng):
    """Trajectory coefficients, random effects, their class-level means,
    and both covariance families, with the conditional-coefficient
    adjustment across outcomes."""
    spec, pri = ctx.spec, ctx.priors
    R, K, ph, q, e = ctx.data.R, spec.K, spec.ph, spec.q, ctx.data.u.shape[1]
    xh, z, u = ctx.designs.xh, ctx.designs.z, ctx.data.u
    class_mask = [(state.c == k) for k in range(K)]

    # 1. beta_rk
    if ph:
        for r in range(R):
            for k in range(K):
                mask = ctx.vis * class_mask[k][:, None]
                off = np.einsum("s,njs->nj", state.qmat[k, r], state.E)
                target = state.y_comp[:, :, r] - off - state.zb[:, :, r]
                xtx = np.einsum("nj,njh,njg->hg", mask, xh, xh)
                xty = np.einsum("nj,njh,nj->h", mask, xh, target)
                prec = xtx / state.s2[k, r] + ctx.sigma_beta_inv
                v = inv_pd(prec, "V_beta")
                mu = v @ (xty / state.s2[k, r])
                state.beta[r, k] = mu + cholesky_pd(v, "V_beta") @ rng.generator.standard_normal(ph)
            _refresh_fixed(state, ctx, outcomes=(r,))

    # 2. b_ri
    for r in range(R):
        qc = state.qmat[state.c, r, :]                       # (n, R)
        off = np.einsum("ns,njs->nj", qc, state.E)
        target = state.y_comp[:, :, r] - state.F[:, :, r] - off
        s2_i = state.s2[state.c, r]
        psi_inv = _batched_spd_inverse(state.psi[state.c, r])
        prec = ctx.zz_vis / s2_i[:, None, None] + psi_inv
        eta_u = np.einsum("nqe,ne->nq", state.eta[r, state.c], u)
        rhs = (np.einsum("nj,njq,nj->nq", ctx.vis, z, target) / s2_i[:, None]
               + np.einsum("nqp,np->nq", psi_inv, eta_u))
        if ctx.n:
            state.b[r] = _batched_mvn_draw(prec, rhs, rng)
        _refresh_zb(state, ctx, r)

    # 3. eta_rkg
    for r in range(R):
        for k in range(K):
            for g in range(q):
                mk = class_mask[k].astype(float)
                psi_gg = state.psi[k, r, g, g]
                utu = np.einsum("n,ne,nf->ef", mk, u, u)
                prec = utu / psi_gg + ctx.sigma_eta_inv
                rhs = np.einsum("n,ne->e", mk * state.b[r, :, g], u) / psi_gg
                v = inv_pd(prec, "V_eta")
                state.eta[r, k, g] = v @ rhs + cholesky_pd(v, "V_eta") @ rng.generator.standard_normal(e)

    # 4. Sigma_k
    for k in range(K):
        mask = ctx.vis * class_mask[k][:, None]
        scatter = np.einsum("nj,njr,njs->rs", mask, state.E, state.E)
        df = pri.nu_sigma + mask.sum()
        state.sigma[k] = sample_inverse_wishart(df, pri.s_sigma + scatter, rng, "Sigma_k scale")
    _refresh_sigma_cache(state)

    # 5. Psi_kr
    for k in range(K):
        mk = class_mask[k].astype(float)
        for r in range(R):
            dev = state.b[r] - u @ state.eta[r, k].T
            scatter = np.einsum("n,nq,np->qp", mk, dev, dev)
            df = pri.nu_psi + mk.sum()
            state.psi[k, r] = sample_inverse_wishart(df, pri.s_psi + scatter, rng, "Psi_kr scale")
    return state


def _draw_visit_latents(state, ctx, rng):
    z, x = ctx.designs.z, ctx.designs.x
    lin = (np.einsum("njp,np->nj", x, state.phi[state.c])
           + np.einsum("njq,nq->nj", z, state.tau))
    visited = ctx.data.d == 1
    lower = np.where(visited, 0.0, -np.inf)
    upper = np.where(visited, np.inf, 0.0)
    state.xi_d = sample_truncated_normal(lin, 1.0, lower, upper, rng)


def _draw_response_latents(state, ctx, rng, r):
    z, x = ctx.designs.z, ctx.designs.x
    lin = (np.einsum("njp,np->nj", x, state.lam[r, state.c])
           + np.einsum("njq,nq->nj", z, state.kappa[r]))
    responded = ctx.data.m[:, :, r] == 1
    lower = np.where(responded, 0.0, -np.inf)
    upper = np.where(responded, np.inf, 0.0)
    draws = sample_truncated_normal(lin, 1.0, lower, upper, rng)
    state.xi_m[r] = np.where(ctx.vis > 0, draws, 0.0)


def update_visit_process(state, ctx, rng):
    """Probit augmentation for the visit flags and its regression blocks."""
    spec, pri = ctx.spec, ctx.priors
    K, p, q = spec.K, spec.p, spec.q
    x, z, u = ctx.designs.x, ctx.designs.z, ctx.data.u

    _draw_visit_latents(state, ctx, rng)

    resid = state.xi_d - np.einsum("njq,nq->nj", z, state.tau)
    for k in range(K):
        mk = (state.c == k).astype(float)
        xtx = np.einsum("n,npq->pq", mk, ctx.xx_all)
        xty = np.einsum("n,njp,nj->p", mk, x, resid)
        v = inv_pd(xtx + ctx.sigma_phi_inv, "V_phi")
        mu = v @ (xty + ctx.sigma_phi_inv_mu)
        state.phi[k] = mu + cholesky_pd(v, "V_phi") @ rng.generator.standard_normal(p)

    lin_phi = np.einsum("njp,np->nj", x, state.phi[state.c])
    omega_inv = _batched_spd_inverse(state.omega[state.c])
    prec = ctx.zz_all + omega_inv
    rhs = np.einsum("njq,nj->nq", z, state.xi_d - lin_phi)
    if ctx.n:
        state.tau = _batched_mvn_draw(prec, rhs, rng)

    for k in range(K):
        mk = (state.c == k).astype(float)
        scatter = np.einsum("n,nq,np->qp", mk, state.tau, state.tau)
        df = pri.nu_omega + mk.sum()
        state.omega[k] = sample_inverse_wishart(df, pri.s_omega + scatter, rng, "Omega_k scale")
    return state


def update_response_process(state, ctx, rng):
    """Probit augmentation for the response flags of modeled outcomes,
    restricted to visited windows."""
    spec, pri = ctx.spec, ctx.priors
    K, p, q = spec.K, spec.p, spec.q
    x, z = ctx.designs.x, ctx.designs.z

    for r in ctx.spec.modeled_outcomes:
        _draw_response_latents(state, ctx, rng, r)
        resid = state.xi_m[r] - np.einsum("njq,nq->nj", z, state.kappa[r])
        for k in range(K):
            mask = ctx.vis * (state.c == k)[:, None]
            xtx = np.einsum("nj,njp,njq->pq", mask, x, x)
            xty = np.einsum("nj,njp,nj->p", mask, x, resid)
            v = inv_pd(xtx + ctx.sigma_lambda_inv, "V_lambda")
            mu = v @ xty
            state.lam[r, k] = mu + cholesky_pd(v, "V_lambda") @ rng.generator.standard_normal(p)

        lin_lam = np.einsum("njp,np->nj", x, state.lam[r, state.c])
        theta_inv = _batched_spd_inverse(state.theta[r, state.c])
        prec = ctx.zz_vis + theta_inv
        rhs = np.einsum("nj,njq,nj->nq", ctx.vis, z, state.xi_m[r] - lin_lam)
        if ctx.n:
            state.kappa[r] = _batched_mvn_draw(prec, rhs, rng)

        for k in range(K):
            mk = (state.c == k).astype(float)
            scatter = np.einsum("n,nq,np->qp", mk, state.kappa[r], state.kappa[r])
            df = pri.nu_theta + mk.sum()
            state.theta[r, k] = sample_inverse_wishart(df, pri.s_theta + scatter, rng, "Theta_rk scale")
    return state


def class_log_likelihoods(state, ctx):
    """Per-patient, per-class log likelihood factors used for reassignment
    (missingness factors included per the estimation mode)."""
    spec = ctx.spec
    n, R, K = ctx.n, ctx.data.R, spec.K
    xh, x, z, u = ctx.designs.xh, ctx.designs.x, ctx.designs.z, ctx.data.u
    out = np.zeros((n, K))
    d = ctx.data.d
    for k in range(K):
        fk = np.einsum("njh,rh->njr", xh, state.beta[:, k, :]) if spec.ph else np.zeros_like(state.zb)
        ek = state.y_comp - fk - state.zb
        quad = np.einsum("nj,njr,rs,njs->n", ctx.vis, ek, state.prec[k], ek)
        ll = -0.5 * (ctx.nvis * (R * _LOG2PI + state.logdet_sigma[k]) + quad)
        for r in range(R):
            dev = state.b[r] - u @ state.eta[r, k].T
            ll = ll + mvn_logpdf(dev, state.psi[k, r], "Psi_kr")
        if spec.models_visit:
            lin = np.einsum("njp,p->nj", x, state.phi[k]) + np.einsum("njq,nq->nj", z, state.tau)
            ll = ll + np.sum(np.where(d == 1, log_ndtr(lin), log_ndtr(-lin)), axis=1)
            ll = ll + mvn_logpdf(state.tau, state.omega[k], "Omega_k")
        for r in spec.modeled_outcomes:
            lin = np.einsum("njp,p->nj", x, state.lam[r, k]) + np.einsum("njq,nq->nj", z, state.kappa[r])
            m_r = ctx.data.m[:, :, r]
            ll = ll + np.sum(ctx.vis * np.where(m_r == 1, log_ndtr(lin), log_ndtr(-lin)), axis=1)
            ll = ll + mvn_logpdf(state.kappa[r], state.theta[r, k], "Theta_rk")
        out[:, k] = ll
    return out


def sample_classes(state, ctx, rng):
    """Reassign class labels from the posterior class probabilities."""
    K = ctx.spec.K
    if K == 1 or ctx.n == 0:
        state.p_class = np.ones((ctx.n, K)) / K
        return state
    with np.errstate(divide="ignore"):
        logp = np.log(class_probs_conditional(state.delta, ctx.data.w))
    logp = logp + class_log_likelihoods(state, ctx)
    mx = logp.max(axis=1)
    dead = ~np.isfinite(mx)
    if dead.any():
        pid = ctx.data.patient_ids[np.flatnonzero(dead)[0]]
        raise FloatingPointError(f"all class log-densities -inf for patient {pid}")
    p = np.exp(logp - mx[:, None])
    p /= p.sum(axis=1, keepdims=True)
    state.p_class = p
    state.c = categorical_rows(p, rng)
    _refresh_fixed(state, ctx)
    return state


def impute_missing_responses(state, ctx, rng):
    """Draw missing responses at visited windows from the conditional
    normal of each outcome given the others in the same window."""
    if not ctx.miss.any():
        return state
    n, J, R = state.y_comp.shape
    for r in range(R):
        cells = ctx.miss[:, :, r]
        if not cells.any():
            continue
        qc = state.qmat[state.c, r, :]
        off = np.einsum("ns,njs->nj", qc, state.E)
        mu_cond = state.F[:, :, r] + state.zb[:, :, r] + off
        sd = np.sqrt(state.s2[state.c, r])[:, None]
        draws = mu_cond + sd * rng.generator.standard_normal((n, J))
        ycr = state.y_comp[:, :, r]
        ycr[cells] = draws[cells]
        state.E[:, :, r] = ycr - state.F[:, :, r] - state.zb[:, :, r]
    return state


@dataclass
class PosteriorDraws:
    """Retained post-burn-in draws, one slot per (chain, retained index)."""

    spec: ModelSpec
    dims: dict
    method: str
    options: McmcOptions
    time_center: float
    time_scale: float
    delta: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    psi: np.ndarray
    p_class: np.ndarray
    c: np.ndarray
    chain: np.ndarray
    phi: np.ndarray = None
    omega: np.ndarray = None
    lam: np.ndarray = None
    theta: np.ndarray = None
    b: np.ndarray = None
    tau: np.ndarray = None
    kappa: np.ndarray = None
    y_miss: np.ndarray = None
    miss_index: np.ndarray = None

    @property
    def n_draws(self):
        return self.delta.shape[0] if self.delta.size else self.c.shape[0]

    def mean_p_class(self):
        return self.p_class.mean(axis=0)

    def scalar_chains(self, array, index):
        """Per-chain trace of one scalar parameter, for convergence checks."""
        values = getattr(self, array)[(slice(None),) + tuple(index)]
        return [values[self.chain == cid] for cid in np.unique(self.chain)]


_PARAM_ARRAYS = ("delta", "beta", "eta", "sigma", "psi", "phi", "omega", "lam", "theta")


def _allocate_draws(ctx, opts, total):
    dims = ctx.dims
    n, J, R, K = dims["n"], dims["J"], dims["R"], dims["K"]
    p, ph, q, e, s = dims["p"], dims["ph"], dims["q"], dims["e"], dims["s"]
    spec = ctx.spec
    miss_index = np.argwhere(ctx.miss)
    store = {
        "delta": np.empty((total, max(K - 1, 0), s)),
        "beta": np.empty((total, R, K, ph)),
        "eta": np.empty((total, R, K, q, e)),
        "sigma": np.empty((total, K, R, R)),
        "psi": np.empty((total, K, R, q, q)),
        "p_class": np.empty((total, n, K)),
        "c": np.empty((total, n), dtype=np.int16),
        "chain": np.empty(total, dtype=np.int16),
    }
    if spec.models_visit:
        store["phi"] = np.empty((total, K, p))
        store["omega"] = np.empty((total, K, q, q))
        store["lam"] = np.empty((total, R, K, p))
        store["theta"] = np.empty((total, R, K, q, q))
    if opts.store_latents:
        store["b"] = np.empty((total, R, n, q))
        if spec.models_visit:
            store["tau"] = np.empty((total, n, q))
            store["kappa"] = np.empty((total, R, n, q))
        store["y_miss"] = np.empty((total, len(miss_index)))
        store["miss_index"] = miss_index
    return store


def _record(store, g, state, ctx, opts, chain_id):
    spec = ctx.spec
    store["delta"][g] = state.delta
    store["beta"][g] = state.beta
    store["eta"][g] = state.eta
    store["sigma"][g] = state.sigma
    store["psi"][g] = state.psi
    store["p_class"][g] = state.p_class
    store["c"][g] = state.c
    store["chain"][g] = chain_id
    if spec.models_visit:
        store["phi"][g] = state.phi
        store["omega"][g] = state.omega
        store["lam"][g] = state.lam
        store["theta"][g] = state.theta
    if opts.store_latents:
        store["b"][g] = state.b
        if spec.models_visit:
            store["tau"][g] = state.tau
            store["kappa"][g] = state.kappa
        idx = store["miss_index"]
        if len(idx):
            store["y_miss"][g] = state.y_comp[idx[:, 0], idx[:, 1], idx[:, 2]]


def _one_iteration(state, ctx, rng):
    update_class_membership(state, ctx, rng)
    update_longitudinal(state, ctx, rng)
    if ctx.spec.models_visit:
        update_visit_process(state, ctx, rng)
        update_response_process(state, ctx, rng)
    sample_classes(state, ctx, rng)
    if ctx.spec.imputes_responses:
        impute_missing_responses(state, ctx, rng)
    return state


def fit(data, spec, priors=None, opts=None):
    """Run the blocked Gibbs sampler and return retained draws.

    The estimation mode comes from ``spec.method``: ``full`` consumes the
    truth block's unmasked outcomes, ``naive`` expects naive-filtered data,
    ``mar`` ignores the missingness processes but imputes missing responses,
    and ``mnar`` adds the visit and response submodels.
    """
    if spec.K < 1:
        raise ValueError("K must be at least 1")
    if spec.q != 1:
        raise NotImplementedError("hierarchically centered engine supports q = 1")
    opts = opts or McmcOptions()

    if spec.method == "full":
        work = data.unmasked()
    else:
        work = data
    if spec.method == "naive" and work.n:
        if np.any(work.m[work.d == 1] != 1):
            raise ValueError("naive fits require naive_filter output (complete windows only)")
    if work.R != spec.R:
        raise ValueError(f"data has R={work.R}, spec expects {spec.R}")
    priors = priors or Priors.defaults(spec, s=work.w.shape[1], e=work.u.shape[1])

    ctx = make_context(work, spec, priors)
    total = opts.retained * opts.chains
    store = _allocate_draws(ctx, opts, total)
    base = RngStream(opts.seed, 661_000)
    g = 0
    for chain in range(opts.chains):
        rng = base.split(chain)
        state = initial_state(ctx, rng, chain)
        for it in range(opts.iterations):
            try:
                _one_iteration(state, ctx, rng)
            except NotPositiveDefiniteError as err:
                raise NotPositiveDefiniteError(
                    f"{err.name} at iteration {it} (chain {chain})", err.matrix) from None
            if it >= opts.burn_in and (it - opts.burn_in) % opts.thin == 0:
                _record(store, g, state, ctx, opts, chain)
                g += 1
            if opts.progress and (it + 1) % 200 == 0:
                print(f"chain {chain}: iteration {it + 1}/{opts.iterations}", file=sys.stderr)
    assert g == total
    return PosteriorDraws(
        spec=spec,
        dims=ctx.dims,
        method=spec.method,
        options=opts,
        time_center=ctx.designs.time_center,
        time_scale=ctx.designs.time_scale,
        **{key: store.get(key) for key in (
            "delta", "beta", "eta", "sigma", "psi", "p_class", "c", "chain",
            "phi", "omega", "lam", "theta", "b", "tau", "kappa", "y_miss", "miss_index")},
    )


def psrf(chains):
    """Split-chain potential scale reduction factor for one scalar."""
    seqs = []
    for ch in chains:
        arr = np.asarray(ch, dtype=float)
        if arr.size < 10:
            raise ValueError("need at least 10 retained draws per chain")
        half = arr.size // 2
        seqs.append(arr[:half])
        seqs.append(arr[arr.size - half:])
    if len(seqs) < 4:
        raise ValueError("need at least 2 chains")
    length = min(len(sq) for sq in seqs)
    mat = np.stack([sq[:length] for sq in seqs])
    within = mat.var(axis=1, ddof=1).mean()
    if within == 0:
        raise ValueError("zero within-chain variance")
    between = length * mat.mean(axis=1).var(ddof=1)
    var_hat = (length - 1) / length * within + between / length
    return float(np.sqrt(var_hat / within))
