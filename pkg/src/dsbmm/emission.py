"""Block-conditional edge likelihood and conjugate connectivity updates.

A weighted layer has a zero-inflated log-normal emission: an edge is present
with probability ``nu[q, r]`` and its log-weight is normal with mean
``x @ beta[q, r]`` and variance ``sigma2[q, r]``.  Unweighted layers are
Bernoulli.  Undirected layers count each unordered pair once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InconsistentEdge, InvalidParameter, SingularDesign
from .rand import as_generator, sample_dirichlet, sample_inverse_gamma

__all__ = [
    "PriorConfig",
    "ConnectivityParams",
    "LayerData",
    "prepare_layers",
    "edge_loglik",
    "node_loglik",
    "layer_loglik",
    "layer_loglik_direct",
    "block_counts",
    "update_nu",
    "update_beta_sigma",
    "update_alpha",
]

_NU_EPS = 1e-300


@dataclass
class PriorConfig:
    """Hyperparameters of the conjugate and transition priors.

    ``beta_mean`` and ``beta_cov`` may be scalars (broadcast over the
    regression dimension) or full vectors / matrices.
    """

    beta_mean: object = 0.0
    beta_cov: object = 1.0
    d0: float = 10.0
    e0: float = 1.0
    b0: float = 1.0
    c0: float = 1.0
    alpha_conc: float = 1.0
    kappa_intercept: float = -1.0
    kappa_own: float = 1.0
    zeta0_sq: float = 10.0
    iota1: float = 1.0
    iota2: float = 0.6

    def __post_init__(self):
        for name in ("d0", "e0", "b0", "c0", "zeta0_sq", "iota1", "iota2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidParameter(f"prior {name} must be positive, got {v}")
        if np.any(np.asarray(self.alpha_conc, dtype=float) <= 0):
            raise InvalidParameter("alpha_conc must be positive")

    def beta_prior(self, k):
        mean = np.broadcast_to(np.asarray(self.beta_mean, dtype=float), (k,)).copy()
        cov = np.asarray(self.beta_cov, dtype=float)
        cov = cov * np.eye(k) if cov.ndim == 0 else cov.reshape(k, k)
        return mean, cov

    def alpha_prior(self, q):
        return np.broadcast_to(np.asarray(self.alpha_conc, dtype=float), (q,)).copy()

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def regression_dim(spec):
    """Regression dimension: the covariates as given, or an implicit intercept."""
    return spec.covariate_dim if spec.covariate_dim > 0 else 1


@dataclass
class ConnectivityParams:
    """Per-layer ``nu`` (Q, Q), ``beta`` (Q, Q, k), ``sigma2`` (Q, Q), ``alpha`` (Q,).

    ``beta`` and ``sigma2`` are ``None`` for unweighted layers.
    """

    nu: list
    beta: list
    sigma2: list
    alpha: list = field(default_factory=list)

    def copy(self):
        cp = lambda xs: [None if x is None else np.array(x, dtype=float) for x in xs]
        return ConnectivityParams(cp(self.nu), cp(self.beta), cp(self.sigma2), cp(self.alpha))


class LayerData:
    """Precomputed per-layer views of a panel used by the sampler."""

    def __init__(self, spec, D, Y, X):
        self.spec = spec
        self.directed = bool(spec.directed)
        self.weighted = bool(spec.weighted)
        self.Q = int(spec.n_blocks)
        self.k = regression_dim(spec)
        self.D = np.ascontiguousarray(D, dtype=np.uint8)
        N, _, T = D.shape
        self.logY = np.zeros((N, N, T))
        present = self.D == 1
        if self.weighted:
            self.logY[present] = np.log(Y[present])
        if spec.covariate_dim > 0:
            self.X = np.ascontiguousarray(X, dtype=float)
        else:
            self.X = np.ones((N, N, T, 1))
        ii, jj, tt = np.nonzero(present)
        if not self.directed:
            keep = ii < jj
            ii, jj, tt = ii[keep], jj[keep], tt[keep]
        self.edge_i, self.edge_j, self.edge_t = ii, jj, tt
        self.edge_logy = self.logY[ii, jj, tt]
        self.edge_x = self.X[ii, jj, tt]
        k = self.edge_x.shape[1]
        self.edge_xx = np.einsum("ea,eb->eab", self.edge_x, self.edge_x).reshape(len(ii), k * k)


def prepare_layers(panel):
    return [LayerData(s, panel.D[l], panel.Y[l], panel.X[l]) for l, s in enumerate(panel.specs)]


def _log_nu(nu):
    nu = np.clip(np.asarray(nu, dtype=float), _NU_EPS, 1.0 - 1e-16)
    return np.log(nu), np.log1p(-nu)


def _kernel_args(ld, params, layer):
    lognu, log1mnu = _log_nu(params.nu[layer])
    Q = ld.Q
    if ld.weighted:
        beta = np.ascontiguousarray(params.beta[layer], dtype=float)
        sigma2 = np.ascontiguousarray(params.sigma2[layer], dtype=float)
    else:
        beta = np.zeros((Q, Q, ld.k))
        sigma2 = np.ones((Q, Q))
    return lognu, log1mnu, beta, sigma2


def edge_loglik(y, d, x, q, r, nu, beta=None, sigma2=None, weighted=True):
    """Log-likelihood of one dyad-time given sender block q and receiver block r.

    ``nu``, ``beta`` and ``sigma2`` are the layer's block-pair arrays; labels
    are 0-based.
    """
    nu_qr = float(np.asarray(nu)[q, r])
    if d == 0:
        return math.log1p(-nu_qr)
    if not weighted:
        return math.log(nu_qr)
    if not y > 0:
        raise InconsistentEdge(f"present weighted edge needs a positive weight, got {y}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu = float(x @ np.atleast_1d(np.asarray(beta)[q, r]))
    s2 = float(np.asarray(sigma2)[q, r])
    ly = math.log(y)
    return (math.log(nu_qr) - ly - 0.5 * math.log(2 * math.pi * s2)
            - (ly - mu) ** 2 / (2 * s2))


def node_loglik(i, ld: LayerData, Zl, params, layer):
    """``(T, Q)`` table: node i's edge log-likelihood for each candidate block."""
    lognu, log1mnu, beta, sigma2 = _kernel_args(ld, params, layer)
    T = ld.D.shape[2]
    out = np.empty((T, ld.Q))
    _kernels.node_emission(int(i), ld.D, ld.logY, ld.X, np.ascontiguousarray(Zl, dtype=np.int64),
                           lognu, log1mnu, beta, sigma2, ld.weighted, ld.directed, out)
    return out


def layer_loglik(ld: LayerData, Zl, params, layer):
    """Total edge log-likelihood of a layer, from block-pair sufficient statistics."""
    Zl = np.asarray(Zl, dtype=np.int64)
    lognu, log1mnu = _log_nu(params.nu[layer])
    present, eligible = block_counts(ld, Zl)
    if not ld.directed:
        upper = np.triu(np.ones((ld.Q, ld.Q), dtype=bool))
        present, eligible = np.where(upper, present, 0.0), np.where(upper, eligible, 0.0)
    total = float(np.sum(present * lognu + (eligible - present) * log1mnu))
    if ld.weighted:
        n, xtx, xty, yty = regression_stats(ld, Zl)
        beta = np.asarray(params.beta[layer], dtype=float)
        s2 = np.asarray(params.sigma2[layer], dtype=float)
        quad = (yty - 2.0 * np.einsum("qrk,qrk->qr", beta, xty)
                + np.einsum("qrk,qrkl,qrl->qr", beta, xtx, beta))
        total += float(np.sum(-0.5 * n * np.log(2.0 * np.pi * s2) - quad / (2.0 * s2)))
        total -= float(np.sum(ld.edge_logy))
    return total


def layer_loglik_direct(ld: LayerData, Zl, params, layer):
    """Same quantity as :func:`layer_loglik`, summed edge by edge."""
    lognu, log1mnu, beta, sigma2 = _kernel_args(ld, params, layer)
    return float(_kernels.layer_emission_total(
        ld.D, ld.logY, ld.X, np.ascontiguousarray(Zl, dtype=np.int64),
        lognu, log1mnu, beta, sigma2, ld.weighted, ld.directed))


def block_counts(ld: LayerData, Zl):
    """Present-edge and eligible-dyad counts per block pair.

    For undirected layers the counts refer to unordered pairs and are
    symmetric.
    """
    Q = ld.Q
    Zl = np.asarray(Zl, dtype=np.int64)
    N, T = Zl.shape
    pair = Zl[ld.edge_i, ld.edge_t] * Q + Zl[ld.edge_j, ld.edge_t]
    present = np.bincount(pair, minlength=Q * Q).reshape(Q, Q).astype(float)
    sizes = np.zeros((T, Q))
    np.add.at(sizes, (np.broadcast_to(np.arange(T), (N, T)), Zl), 1.0)
    eligible = sizes.T @ sizes - np.diag(sizes.sum(axis=0))
    if not ld.directed:
        # edge list holds i < j once; fold to unordered block pairs
        present = present + present.T - np.diag(np.diag(present))
        eligible[np.diag_indices(Q)] /= 2.0
    return present, eligible


def update_nu(ld: LayerData, Zl, prior: PriorConfig, rng):
    """Beta(b0 + present, c0 + absent) draw per block pair."""
    gen = as_generator(rng)
    present, eligible = block_counts(ld, Zl)
    a = prior.b0 + present
    b = prior.c0 + eligible - present
    if ld.directed:
        return gen.beta(a, b)
    Q = ld.Q
    iu = np.triu_indices(Q)
    nu = np.zeros((Q, Q))
    nu[iu] = gen.beta(a[iu], b[iu])
    return np.where(np.triu(np.ones((Q, Q), dtype=bool)), nu, nu.T)


def regression_stats(ld: LayerData, Zl):
    """Per block pair: count, X'X, X'y and y'y of present edges."""
    Q, k = ld.Q, ld.k
    zq = Zl[ld.edge_i, ld.edge_t]
    zr = Zl[ld.edge_j, ld.edge_t]
    if not ld.directed:
        zq, zr = np.minimum(zq, zr), np.maximum(zq, zr)
    pair = zq * Q + zr
    n = np.bincount(pair, minlength=Q * Q).astype(float)
    xtx = np.stack([np.bincount(pair, weights=ld.edge_xx[:, c], minlength=Q * Q)
                    for c in range(k * k)], axis=1).reshape(Q, Q, k, k)
    xty = np.stack([np.bincount(pair, weights=ld.edge_x[:, c] * ld.edge_logy, minlength=Q * Q)
                    for c in range(k)], axis=1).reshape(Q, Q, k)
    yty = np.bincount(pair, weights=ld.edge_logy ** 2, minlength=Q * Q).reshape(Q, Q)
    return n.reshape(Q, Q), xtx, xty, yty


def update_beta_sigma(ld: LayerData, Zl, beta, prior: PriorConfig, rng):
    """Draw ``sigma2 | beta`` then ``beta | sigma2`` for every block pair.

    Returns new ``(beta, sigma2)``.  Undirected layers update ``q <= r`` and
    mirror.
    """
    gen = as_generator(rng)
    Q, k = ld.Q, ld.k
    b0, S0 = prior.beta_prior(k)
    S0inv = np.linalg.inv(S0)
    n, xtx, xty, yty = regression_stats(ld, Zl)
    beta_new = np.array(beta, dtype=float, copy=True)
    sigma2_new = np.zeros((Q, Q))
    for q in range(Q):
        for r in range(Q):
            if not ld.directed and r < q:
                continue
            bq = beta_new[q, r]
            rss = yty[q, r] - 2.0 * bq @ xty[q, r] + bq @ xtx[q, r] @ bq
            rss = max(rss, 0.0)
            s2 = sample_inverse_gamma((prior.d0 + n[q, r]) / 2.0, (prior.e0 + rss) / 2.0, gen)
            prec = S0inv + xtx[q, r] / s2
            try:
                chol = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:
                raise SingularDesign(f"block pair ({q + 1},{r + 1}): singular regression design") from exc
            rhs = S0inv @ b0 + xty[q, r] / s2
            mean = np.linalg.solve(prec, rhs)
            z = gen.standard_normal(k)
            bnew = mean + np.linalg.solve(chol.T, z)
            sigma2_new[q, r] = s2
            beta_new[q, r] = bnew
            if not ld.directed:
                sigma2_new[r, q] = s2
                beta_new[r, q] = bnew
    return beta_new, sigma2_new


def beta_posterior(ld: LayerData, Zl, q, r, sigma2_qr, prior: PriorConfig):
    """Mean and covariance of ``beta[q, r]`` given ``sigma2[q, r]``."""
    b0, S0 = prior.beta_prior(ld.k)
    S0inv = np.linalg.inv(S0)
    n, xtx, xty, _ = regression_stats(ld, Zl)
    if not ld.directed and r < q:
        q, r = r, q
    cov = np.linalg.inv(S0inv + xtx[q, r] / sigma2_qr)
    return cov @ (S0inv @ b0 + xty[q, r] / sigma2_qr), cov


def update_alpha(z_first, n_blocks, prior: PriorConfig, rng):
    """Dirichlet(alpha_conc + first-period counts) draw."""
    counts = np.bincount(np.asarray(z_first, dtype=np.int64), minlength=n_blocks)[:n_blocks]
    return sample_dirichlet(prior.alpha_prior(n_blocks) + counts, rng)

