"""Random variate generators used by the Gibbs sampler.

Every sampler takes an explicit :class:`RngStream` (or a bare
``numpy.random.Generator``); nothing touches global random state.  The
Polya-Gamma and generalized inverse Gaussian samplers are vectorised and
exact.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_ndtr

from .errors import (
    InvalidParameter,
    NonFiniteParameter,
    NotASimplex,
    NotPositiveDefinite,
)

__all__ = [
    "RngStream",
    "as_generator",
    "sample_polya_gamma",
    "polya_gamma_mean",
    "sample_gig",
    "sample_dirichlet",
    "sample_inverse_gamma",
    "sample_mvn",
    "sample_mvn_precision",
    "sample_categorical",
]


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Two streams with the same pair produce identical sequences; streams with
    different ``stream_id`` are statistically independent (they are spawned
    children of one ``SeedSequence``).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# ---------------------------------------------------------------------------
# Polya-Gamma PG(1, z)
# ---------------------------------------------------------------------------

_PG_T = 0.64
_PI2_8 = math.pi ** 2 / 8.0


def _pg_coef(n, x):
    """n-th term of the alternating series for the J*(1, z) density."""
    k = (n + 0.5) * math.pi
    out = np.empty_like(x)
    hi = x > _PG_T
    out[hi] = k * np.exp(-0.5 * k * k * x[hi])
    lo = ~hi
    xl = x[lo]
    out[lo] = k * (2.0 / (math.pi * xl)) ** 1.5 * np.exp(-2.0 * (n + 0.5) ** 2 / xl)
    return out


def _truncated_ig(z, gen):
    """Inverse Gaussian IG(1/z, 1) truncated to (0, t); ``z`` is a 1-d array."""
    t = _PG_T
    out = np.empty(z.size)
    big_mu = z < 1.0 / t  # mean 1/z exceeds the truncation point

    # Large mean: propose from the chi-square-like envelope and correct.
    idx = np.flatnonzero(big_mu)
    while idx.size:
        e1 = gen.standard_exponential(idx.size)
        e2 = gen.standard_exponential(idx.size)
        ok = e1 * e1 <= 2.0 * e2 / t
        x = t / (1.0 + t * e1[ok]) ** 2
        sub = idx[ok]
        u = gen.random(sub.size)
        acc = u <= np.exp(-0.5 * z[sub] ** 2 * x)
        out[sub[acc]] = x[acc]
        done = np.zeros(idx.size, dtype=bool)
        done[np.flatnonzero(ok)[acc]] = True
        idx = idx[~done]

    # Small mean: plain IG draws until one falls below t.
    idx = np.flatnonzero(~big_mu)
    while idx.size:
        mu = 1.0 / z[idx]
        y = gen.standard_normal(idx.size) ** 2
        c = 0.5 * mu * y
        x = mu / (1.0 + c + np.sqrt(2.0 * c + c * c))
        u = gen.random(idx.size)
        flip = u > mu / (mu + x)
        x[flip] = mu[flip] ** 2 / x[flip]
        ok = x < t
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def _pg_devroye(h):
    """Probability of choosing the exponential tail proposal, given z/2."""
    t = _PG_T
    k = _PI2_8 + 0.5 * h * h
    rt = math.sqrt(1.0 / t)
    x0 = np.log(k) + k * t
    xb = x0 - h + log_ndtr(rt * (t * h - 1.0))
    xa = x0 + h + log_ndtr(-rt * (t * h + 1.0))
    log_ratio = math.log(4.0 / math.pi) + np.logaddexp(xb, xa)
    return k, expit(-log_ratio)


def sample_polya_gamma(z, rng):
    """Draw from PG(1, z) by the exact alternating-series rejection method.

    ``z`` may be a scalar or an array; the output has the same shape.
    """
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)):
        raise NonFiniteParameter("Polya-Gamma tilt must be finite")
    gen = as_generator(rng)
    h = 0.5 * np.abs(z_arr).ravel()
    out = np.empty(h.size)
    k_all, p_exp_all = _pg_devroye(h)
    pending = np.arange(h.size)
    while pending.size:
        hh = h[pending]
        k = k_all[pending]
        x = np.empty(pending.size)
        use_exp = gen.random(pending.size) < p_exp_all[pending]
        ne = int(use_exp.sum())
        x[use_exp] = _PG_T + gen.standard_exponential(ne) / k[use_exp]
        x[~use_exp] = _truncated_ig(hh[~use_exp], gen)

        s = _pg_coef(0, x)
        y = gen.random(pending.size) * s
        accepted = np.zeros(pending.size, dtype=bool)
        live = np.arange(pending.size)
        n = 0
        while live.size:
            n += 1
            a = _pg_coef(n, x[live])
            if n % 2:
                s[live] -= a
                hit = y[live] <= s[live]
                accepted[live[hit]] = True
                live = live[~hit]
            else:
                s[live] += a
                miss = y[live] > s[live]
                live = live[~miss]
        out[pending[accepted]] = 0.25 * x[accepted]
        pending = pending[~accepted]
    if z_arr.ndim == 0:
        return float(out[0])
    return out.reshape(z_arr.shape)


def polya_gamma_mean(z):
    """E[PG(1, z)] = tanh(z/2) / (2z), with limit 1/4 at zero."""
    z = np.abs(np.asarray(z, dtype=float))
    small = z < 1e-6
    zs = np.where(small, 1.0, z)
    return np.where(small, 0.25 - z * z / 48.0, np.tanh(zs / 2.0) / (2.0 * zs))


# ---------------------------------------------------------------------------
# GIG(1/2, a, b)
# ---------------------------------------------------------------------------

def sample_gig(a, b, rng):
    """Draw from GIG(p=1/2, a, b), density proportional to
    ``x**(-1/2) * exp(-(a*x + b/x)/2)``.

    Uses the fact that the reciprocal is inverse Gaussian with mean
    ``sqrt(a/b)`` and shape ``a``, written so that ``b -> 0`` degrades
    smoothly to the Gamma(1/2, rate a/2) limit.  Broadcasts over array
    arguments.
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(a_arr)) and np.all(np.isfinite(b_arr))):
        raise InvalidParameter("GIG parameters must be finite")
    if np.any(a_arr <= 0) or np.any(b_arr < 0):
        raise InvalidParameter("GIG(1/2, a, b) requires a > 0 and b >= 0")
    gen = as_generator(rng)
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    shape = a_arr.shape
    a_f = a_arr.ravel()
    b_f = b_arr.ravel()
    r = np.sqrt(b_f / a_f)
    out = np.empty(a_f.size)
    todo = np.arange(a_f.size)
    while todo.size:
        rr = r[todo]
        g = gen.standard_normal(todo.size) ** 2 / (2.0 * a_f[todo])
        inv = rr + g + np.sqrt(2.0 * rr * g + g * g)
        u = gen.random(todo.size)
        ok = inv > 0  # fails only if a chi-square draw underflows at b=0
        inv_ok = np.where(ok, inv, 1.0)
        # inv = 1/x1 for the smaller IG root x1; keep it w.p. mu / (mu + x1)
        keep = u * (1.0 + rr / inv_ok) <= 1.0
        out[todo] = np.where(keep, inv_ok, rr * rr / inv_ok)
        todo = todo[~ok]
    if len(shape) == 0:
        return float(out[0])
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Conjugate-family wrappers
# ---------------------------------------------------------------------------

def sample_dirichlet(concentration, rng):
    alpha = np.asarray(concentration, dtype=float)
    if alpha.ndim != 1 or alpha.size == 0 or not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise InvalidParameter("Dirichlet concentration must be a positive vector")
    gen = as_generator(rng)
    g = gen.standard_gamma(alpha)
    tot = g.sum()
    if tot <= 0:
        # all gammas underflowed (tiny concentrations); fall back to a vertex
        out = np.zeros_like(alpha)
        out[gen.choice(alpha.size, p=alpha / alpha.sum())] = 1.0
        return out
    return g / tot


def sample_inverse_gamma(shape, scale, rng):
    """IG(shape, scale): density ∝ x^(-shape-1) exp(-scale/x)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if not (np.all(np.isfinite(shape)) and np.all(np.isfinite(scale))):
        raise InvalidParameter("inverse gamma parameters must be finite")
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise InvalidParameter("inverse gamma requires shape > 0 and scale > 0")
    gen = as_generator(rng)
    draw = scale / gen.standard_gamma(shape)
    return float(draw) if np.ndim(draw) == 0 else draw


def _cholesky(mat, what):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NotPositiveDefinite(f"{what} must be a square matrix")
    if not np.all(np.isfinite(mat)):
        raise NotPositiveDefinite(f"{what} has non-finite entries")
    if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
        raise NotPositiveDefinite(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{what} is not positive definite") from exc


def sample_mvn(mean, covariance, rng):
    mean = np.asarray(mean, dtype=float)
    chol = _cholesky(covariance, "covariance")
    if chol.shape[0] != mean.size:
        raise InvalidParameter("mean and covariance sizes disagree")
    gen = as_generator(rng)
    return mean + chol @ gen.standard_normal(mean.size)


def sample_mvn_precision(precision, rhs, rng):
    """Draw from N(P^{-1} rhs, P^{-1}) given the precision ``P``.

    This is the canonical form produced by Gaussian full conditionals and
    avoids forming the covariance explicitly.
    """
    chol = _cholesky(precision, "precision")
    rhs = np.asarray(rhs, dtype=float)
    gen = as_generator(rng)
    w = solve_triangular(chol, rhs, lower=True)
    mean_part = solve_triangular(chol.T, w, lower=False)
    noise = solve_triangular(chol.T, gen.standard_normal(rhs.size), lower=False)
    return mean_part + noise


def sample_categorical(probs, rng) -> int:
    """Return a 0-based index drawn with the given probabilities."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NotASimplex("probabilities must be a nonnegative vector")
    if abs(p.sum() - 1.0) > 1e-9:
        raise NotASimplex(f"probabilities sum to {p.sum():.12g}, not 1")
    gen = as_generator(rng)
    u = gen.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    idx = min(idx, p.size - 1)
    while p[idx] == 0 and idx > 0:
        idx -= 1
    return idx
