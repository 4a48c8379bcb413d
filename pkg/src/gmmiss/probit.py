"""Class-membership probabilities for the latent-utility probit model.

Two conventions coexist:

* ``class_probs_conditional`` -- the model's own probabilities, with the
  differenced utilities carrying independent unit-variance errors.  These
  feed the class-assignment step and the marginal density.
* ``class_probs_marginal`` -- the reporting convention for marginal
  effects, in which the utility noise is the difference of two independent
  standard normals (sd sqrt(2) for two classes).  Truth and estimates are
  both computed this way, so the convention cancels in bias.

Both reduce to one-dimensional integrals because the relevant errors are
independent; a fixed Gauss-Legendre rule evaluates them to near machine
precision for the class counts used here.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = ["class_probs_conditional", "class_probs_marginal"]

_GL_NODES = 201


def _legendre(lo, hi, n=_GL_NODES):
    x, w = np.polynomial.legendre.leggauss(n)
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + half * x, half * w


def _phi(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def class_probs_conditional(delta, w_cov):
    """pi_ik = Pr(c_i = k) with independent N(0,1) differenced-utility errors.

    delta: (K-1, s); w_cov: (n, s).  Returns (n, K) rows summing to 1.
    """
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    w_cov = np.asarray(w_cov, dtype=float)
    n = w_cov.shape[0]
    K = delta.shape[0] + 1
    if K == 1:
        return np.ones((n, 1))
    mu = w_cov @ delta.T                              # (n, K-1)
    if K == 2:
        p1 = ndtr(mu[:, 0])
        return np.column_stack([p1, 1.0 - p1])
    out = np.empty((n, K))
    out[:, K - 1] = np.prod(ndtr(-mu), axis=1)
    hi = max(9.0, float(mu.max()) + 9.0) if n else 9.0
    u, wts = _legendre(0.0, hi)
    for k in range(K - 1):
        dens = _phi(u[None, :] - mu[:, k:k + 1])      # (n, nodes)
        for l in range(K - 1):
            if l != k:
                dens = dens * ndtr(u[None, :] - mu[:, l:l + 1])
        out[:, k] = dens @ wts
    out /= out.sum(axis=1, keepdims=True)
    return out


def class_probs_marginal(delta, w_cov):
    """Reporting-convention probabilities: independent N(0,1) errors on the
    K raw utilities (reference utility mean 0), i.e. sd-sqrt(2) differenced
    noise.  Exact for K = 2; Gauss-Legendre otherwise."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    w_cov = np.asarray(w_cov, dtype=float)
    n = w_cov.shape[0]
    K = delta.shape[0] + 1
    if K == 1:
        return np.ones((n, 1))
    mu = w_cov @ delta.T                              # (n, K-1) differenced means
    if K == 2:
        p1 = ndtr(mu[:, 0] / np.sqrt(2.0))
        return np.column_stack([p1, 1.0 - p1])
    raw = np.concatenate([mu, np.zeros((n, 1))], axis=1)  # (n, K) raw-utility means
    x, wts = _legendre(-9.0, 9.0)
    out = np.empty((n, K))
    for k in range(K):
        dens = _phi(x)[None, :]
        for l in range(K):
            if l != k:
                dens = dens * ndtr(x[None, :] + raw[:, k:k + 1] - raw[:, l:l + 1])
        out[:, k] = dens @ wts
    out /= out.sum(axis=1, keepdims=True)
    return out
