"""Seeded random sampling and dense linear-algebra primitives.

Every stochastic routine in the package draws through :class:`RngStream`,
a counter-based (Philox) stream keyed by ``(seed, stream_id)``.  Identical
keys reproduce identical draw sequences; distinct stream ids give
statistically independent streams, so chains, replications, and patients
can be split across workers without sharing state.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import log_ndtr, ndtr, ndtri

__all__ = [
    "RngStream",
    "NotPositiveDefiniteError",
    "cholesky_pd",
    "sample_mvn",
    "sample_truncated_normal",
    "sample_inverse_wishart",
    "sample_categorical",
    "std_normal_cdf",
    "std_normal_inv_cdf",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF

# Standardized bound beyond which the inverse-CDF body is abandoned for
# exponential rejection (deep truncation regime).
_TAIL_SWITCH = 6.0
_MIN_TAIL_MASS = 1e-300


class NotPositiveDefiniteError(ValueError):
    """A matrix required to be positive-definite failed factorization."""

    def __init__(self, name, matrix=None):
        self.name = name
        self.matrix = matrix
        super().__init__(f"matrix '{name}' is not positive-definite")


def _mix64(a, b):
    # splitmix64-style combine; deterministic derivation of child stream ids
    x = (a + 0x9E3779B97F4A7C15 * (b + 1)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Single-owner: never share one instance across concurrent callers.  Use
    :meth:`split` to derive independent child streams for patients, chains,
    or replications.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = (self.seed << 64) | self.stream_id
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def split(self, label):
        """Derive an independent stream; deterministic in (self, label)."""
        return RngStream(self.seed, _mix64(self.stream_id, int(label)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def cholesky_pd(mat, name="matrix"):
    """Lower Cholesky factor, raising :class:`NotPositiveDefiniteError`."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(name, np.asarray(mat)) from None


def sample_mvn(mean, cov, rng, size=None, name="cov"):
    """Draw from MVN(mean, cov) via Cholesky.

    ``cov`` must be positive-definite, except for the degenerate all-zero
    matrix which returns ``mean`` exactly.  With ``size=g`` returns a
    ``(g, d)`` array.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[-1] if mean.ndim else 1
    if cov.shape != (d, d):
        raise ValueError(f"cov shape {cov.shape} incompatible with mean length {d}")
    if not np.all(cov == 0.0):
        chol = cholesky_pd(cov, name)
    else:
        chol = np.zeros((d, d))
    shape = (d,) if size is None else (size, d)
    z = rng.generator.standard_normal(shape)
    return mean + z @ chol.T


def _tail_rejection_lower(a, rng):
    """Standard normal conditioned on > a (a deep in the right tail)."""
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    while todo.any():
        m = int(todo.sum())
        u = rng.generator.random(m)
        z = a[todo] - np.log1p(-u) / lam[todo]
        accept = rng.generator.random(m) <= np.exp(-0.5 * (z - lam[todo]) ** 2)
        idx = np.flatnonzero(todo)
        hit = idx[accept]
        out[hit] = z[accept]
        todo[hit] = False
    return out


def _interval_rejection(a, b, rng):
    """Standard normal conditioned on (a, b), interval deep in a tail.

    Uniform proposal with density-ratio acceptance; adequate because deep
    two-sided truncations only arise with short intervals.
    """
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    while todo.any():
        m = int(todo.sum())
        al, bl = a[todo], b[todo]
        z = al + (bl - al) * rng.generator.random(m)
        # bound of exp(-z^2/2) on [a, b] attained at the endpoint nearer 0
        zref = np.where(al > 0, al, np.where(bl < 0, bl, 0.0))
        accept = rng.generator.random(m) <= np.exp(-0.5 * (z * z - zref * zref))
        idx = np.flatnonzero(todo)
        hit = idx[accept]
        out[hit] = z[accept]
        todo[hit] = False
    return out


def _truncated_std_normal(a, b, rng):
    """Vectorized standard normal truncated to (a, b); a/b may be +-inf."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(a.shape)

    lo_only = np.isneginf(a) & np.isposinf(b)
    if lo_only.any():
        out[lo_only] = rng.generator.standard_normal(int(lo_only.sum()))

    # mirror one-sided upper truncations into lower ones
    flip = np.isneginf(a) & np.isfinite(b)
    aa = np.where(flip, -b, a)
    bb = np.where(flip, np.inf, b)

    one_sided = np.isfinite(aa) & np.isposinf(bb)
    deep = one_sided & (aa > _TAIL_SWITCH)
    body = one_sided & ~deep
    if body.any():
        # complementary inverse CDF keeps precision for aa in (-inf, 6]
        mass = ndtr(-aa[body])
        u = rng.generator.random(int(body.sum())) * mass
        out[body] = -ndtri(np.maximum(u, 1e-320))
    if deep.any():
        out[deep] = _tail_rejection_lower(aa[deep], rng)

    two = np.isfinite(aa) & np.isfinite(bb)
    if two.any():
        a2, b2 = aa[two], bb[two]
        mass = ndtr(b2) - ndtr(a2)
        if np.any((ndtr(-a2) < _MIN_TAIL_MASS) & (a2 > 0)) or np.any(
            (ndtr(b2) < _MIN_TAIL_MASS) & (b2 < 0)
        ):
            raise ValueError("impossible truncation: interval mass below 1e-300")
        vals = np.empty(a2.shape)
        deep2 = (a2 > _TAIL_SWITCH) | (b2 < -_TAIL_SWITCH)
        if deep2.any():
            neg = b2 < 0
            lo = np.where(neg, -b2, a2)[deep2]
            hi = np.where(neg, -a2, b2)[deep2]
            drawn = _interval_rejection(lo, hi, rng)
            vals[deep2] = np.where(neg[deep2], -drawn, drawn)
        mid = ~deep2
        if mid.any():
            u = ndtr(a2[mid]) + rng.generator.random(int(mid.sum())) * mass[mid]
            vals[mid] = ndtri(np.clip(u, 1e-320, 1.0 - 1e-16))
        vals = np.clip(vals, a2, b2)
        out[two] = vals

    return np.where(flip, -out, out)


def sample_truncated_normal(mean, sd, lower=None, upper=None, rng=None, size=None):
    """Normal(mean, sd^2) truncated to (lower, upper).

    Inverse-CDF in the body, exponential rejection beyond 6 sd so deep
    truncations neither hang nor lose the bound.  Bounds are respected
    exactly; ``None`` means unbounded on that side.  Broadcasts over array
    arguments; scalar inputs return a float.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    lo = np.asarray(-np.inf if lower is None else lower, dtype=float)
    hi = np.asarray(np.inf if upper is None else upper, dtype=float)
    if np.any(lo >= hi):
        raise ValueError("lower bound must be strictly below upper bound")
    shape = np.broadcast_shapes(mean.shape, sd.shape, lo.shape, hi.shape)
    if size is not None:
        shape = (size,) + shape if shape else (size,)
    mean, sd, lo, hi = (np.broadcast_to(v, shape) for v in (mean, sd, lo, hi))
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    scalar = a.ndim == 0
    z = _truncated_std_normal(np.atleast_1d(a), np.atleast_1d(b), rng)
    res = mean + sd * z.reshape(shape)
    return float(res) if scalar and size is None else res


def sample_inverse_wishart(df, scale, rng, name="scale"):
    """Inverse-Wishart draw with mean ``scale / (df - dim - 1)``.

    Bartlett construction on the Wishart of the precision; the returned
    matrix is symmetric positive-definite by construction.
    """
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if df <= d - 1:
        raise ValueError(f"inverse-Wishart df {df} must exceed dim - 1 = {d - 1}")
    chol_s = cholesky_pd(scale, name)
    a = np.zeros((d, d))
    dfs = df - np.arange(d)
    a[np.diag_indices(d)] = np.sqrt(rng.generator.chisquare(dfs))
    if d > 1:
        a[np.tril_indices(d, -1)] = rng.generator.standard_normal(d * (d - 1) // 2)
    # X = (L A^{-T})(L A^{-T})^T with L = chol(scale): inverse of a
    # Wishart(df, scale^{-1}) draw, no explicit matrix inversion.
    m = solve_triangular(a, chol_s.T, lower=True)
    x = m.T @ m
    return 0.5 * (x + x.T)


def sample_categorical(probs, rng):
    """Draw an index in 1..K with the given probabilities.

    Probabilities must be nonnegative and sum to 1 within 1e-8 (they are
    renormalized internally).
    """
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    tot = p.sum()
    if tot <= 0:
        raise ValueError("all-zero probability vector")
    if abs(tot - 1.0) > 1e-8:
        raise ValueError(f"probabilities sum to {tot}, not 1 within 1e-8")
    u = rng.generator.random()
    return int(np.searchsorted(np.cumsum(p / tot), u, side="right")) + 1


def categorical_rows(probs, rng):
    """Vectorized categorical draw per row; returns 0-based indices."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.generator.random((probs.shape[0], 1))
    return (u > cdf).sum(axis=1)


def std_normal_cdf(x):
    """Standard normal CDF."""
    return ndtr(x)


def std_normal_inv_cdf(p):
    """Standard normal quantile; errors at p <= 0 or p >= 1."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")
    out = ndtri(p)
    return float(out) if out.ndim == 0 else out


def log_std_normal_cdf(x):
    """log Phi(x), finite for arguments far into the left tail."""
    return log_ndtr(x)


def mvn_logpdf(dev, cov, name="cov"):
    """Log density of rows of ``dev`` under MVN(0, cov).

    ``dev`` has shape (..., d); a single factorization is shared.
    """
    dev = np.asarray(dev, dtype=float)
    d = dev.shape[-1]
    chol = cholesky_pd(cov, name)
    sol = solve_triangular(chol, dev.reshape(-1, d).T, lower=True)
    quad = np.sum(sol * sol, axis=0).reshape(dev.shape[:-1])
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


def solve_pd(mat, rhs, name="matrix"):
    """Solve ``mat @ x = rhs`` for symmetric positive-definite ``mat``."""
    try:
        factor = cho_factor(mat, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(name, np.asarray(mat)) from None
    return cho_solve(factor, rhs)


def inv_pd(mat, name="matrix"):
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    d = mat.shape[0]
    out = solve_pd(mat, np.eye(d), name)
    return 0.5 * (out + out.T)
