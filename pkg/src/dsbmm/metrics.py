"""Evaluation of fitted chains: partition agreement, parameter error,
credible-interval coverage, Granger-block causality and MCMC diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, kv
from scipy.stats import norm

from .errors import ConstantChain, EmptyChain, LengthMismatch, MissingTruth
from .transition import DesignLayout, layer_log_table

__all__ = [
    "EvaluationReport",
    "adjusted_rand_index",
    "global_ari",
    "map_membership",
    "align_labels",
    "brute_force_alignment",
    "permute_chain",
    "mse",
    "cic",
    "gbc",
    "autocorrelation",
    "spectrum0_ar",
    "geweke",
    "heidelberger_welch",
    "diagnostics",
    "evaluate",
]


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index of two labelings."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"labelings have lengths {a.size} and {b.size}")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    comb = lambda x: x * (x - 1) / 2.0
    index = comb(table).sum()
    rows = comb(table.sum(axis=1)).sum()
    cols = comb(table.sum(axis=0)).sum()
    expected = rows * cols / comb(n)
    maximum = (rows + cols) / 2.0
    if maximum == expected:
        # both partitions trivial (all one block or all singletons)
        return 1.0
    return float((index - expected) / (maximum - expected))


def global_ari(z_true, z_est) -> float:
    """ARI on labels pooled over all node-time pairs of one layer."""
    return adjusted_rand_index(z_true, z_est)


def map_membership(chain):
    """Modal label per (layer, node, time); ties go to the smallest label.

    Returns a 0-based ``(L, N, T)`` array.
    """
    chain.require_draws(1)
    Z = chain.Z
    out = np.empty(Z.shape[1:], dtype=np.int64)
    for l, q in enumerate(chain.n_blocks):
        counts = np.stack([(Z[:, l] == k).sum(axis=0) for k in range(q)])
        out[l] = np.argmax(counts, axis=0)  # argmax returns the first maximum
    return out


def _confusion(est, true, q):
    c = np.zeros((q, q))
    np.add.at(c, (np.asarray(est).ravel(), np.asarray(true).ravel()), 1.0)
    return c


def align_labels(est, truth, n_blocks):
    """Per-layer permutation ``perm[l][k]`` mapping estimated label k to a true label.

    ``est`` and ``truth`` are 0-based ``(L, N, T)`` arrays; the permutation
    maximises the number of agreeing (node, time) cells.
    """
    perms = []
    for l, q in enumerate(n_blocks):
        c = _confusion(est[l], truth[l], q)
        rows, cols = linear_sum_assignment(-c)
        perm = np.empty(q, dtype=np.int64)
        perm[rows] = cols
        perms.append(perm)
    return perms


def brute_force_alignment(est, truth, q):
    """Exhaustive search over permutations for one layer (small Q only)."""
    c = _confusion(est, truth, q)
    best, best_score = None, -1.0
    for p in permutations(range(q)):
        score = sum(c[k, p[k]] for k in range(q))
        if score > best_score:
            best, best_score = np.array(p), score
    return best


def _relabel_kappa(kappa_draws, layout: DesignLayout, perms):
    """Re-express coefficient draws after relabeling every layer's blocks.

    ``kappa_draws[l]`` has shape ``(R, Q_l - 1, p + 1)``.  Transition tables
    are permuted in both the conditioning joint state and the outcome label,
    then inverted back to coefficients.
    """
    L = layout.n_layers
    # new joint state s' corresponds to old state with z_old[m] = inv[m][z_new[m]]
    inv = [np.argsort(p) for p in perms]
    grids = np.array(np.unravel_index(np.arange(layout.n_states), layout.n_blocks))
    old_states = np.zeros(layout.n_states, dtype=np.int64)
    for m in range(L):
        old_states += inv[m][grids[m]] * layout.strides[m]
    w_inv = np.linalg.inv(layout.design)
    out = []
    for l in range(L):
        draws = np.asarray(kappa_draws[l], dtype=float)
        R = draws.shape[0]
        new = np.empty_like(draws)
        for r in range(R):
            tab = layer_log_table(layout, draws[r])  # (M, Q), old labels
            tab = tab[old_states][:, inv[l]]
            g = tab[:, :-1] - tab[:, -1:]
            new[r] = (w_inv @ g).T
        out.append(new)
    return out


def permute_chain(chain, perms):
    """Relabel every block-indexed draw in place (``perms`` from :func:`align_labels`)."""
    chain.freeze()
    if all(np.array_equal(p, np.arange(p.size)) for p in perms):
        return chain
    for l, perm in enumerate(perms):
        inv = np.argsort(perm)
        chain.nu[l] = chain.nu[l][:, inv][:, :, inv]
        chain.alpha[l] = chain.alpha[l][:, inv]
        if chain.beta[l] is not None:
            chain.beta[l] = chain.beta[l][:, inv][:, :, inv]
            chain.sigma2[l] = chain.sigma2[l][:, inv][:, :, inv]
        chain.Z[:, l] = perm[chain.Z[:, l]]
    chain.kappa = _relabel_kappa(chain.kappa, chain.layout, perms)
    return chain


# ---------------------------------------------------------------------------
# Parameter error and intervals
# ---------------------------------------------------------------------------

def _unordered_mask(q, directed):
    if directed:
        return np.ones((q, q), dtype=bool)
    return np.triu(np.ones((q, q), dtype=bool))


def mse(chain, truth_config, family, layer, kappa_true=None) -> float:
    """Mean squared error of posterior medians against the truth.

    ``family`` is one of ``nu``, ``beta``, ``sigma2``, ``kappa``.  Undirected
    layers average over unordered block pairs; ``kappa`` averages over all
    coefficients.
    """
    chain.require_draws(1)
    spec = chain.specs[layer]
    if family == "kappa":
        if kappa_true is None:
            raise MissingTruth("true coefficients are required for kappa")
        med = np.median(chain.kappa[layer], axis=0)
        return float(np.mean((med - np.asarray(kappa_true[layer])) ** 2))
    if family not in ("nu", "beta", "sigma2"):
        raise ValueError(f"unknown family {family!r}")
    draws = getattr(chain, family)[layer]
    family_truth = getattr(truth_config, family, None)
    truth = family_truth[layer] if family_truth is not None else None
    if draws is None:
        raise MissingTruth(f"layer {layer + 1} has no {family} parameters")
    if truth is None:
        raise MissingTruth(f"no true {family} for layer {layer + 1}")
    med = np.median(draws, axis=0)
    sq = (med - np.asarray(truth, dtype=float).reshape(med.shape)) ** 2
    mask = _unordered_mask(spec.n_blocks, spec.directed)
    return float(np.mean(sq[mask]))


def _intervals(draws, level):
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    return lo, hi


def cic(chain_kappa, truth_kappa, layout: DesignLayout, level=0.95, which="eligible"):
    """Credible-interval coverage per layer: ``(fraction, n_coefficients)``.

    ``which='eligible'`` uses the shrinkage-eligible coefficients (all but
    the intercept and the own main effect); ``'all'`` uses every one.
    """
    out = []
    for l, draws in enumerate(chain_kappa):
        draws = np.asarray(draws)
        if draws.shape[0] < 1:
            raise EmptyChain("no retained draws")
        lo, hi = _intervals(draws, level)
        inside = (lo <= truth_kappa[l]) & (truth_kappa[l] <= hi)
        mask = layout.shrinkage_mask(l) if which == "eligible" else np.ones(layout.p + 1, dtype=bool)
        sel = inside[:, mask]
        out.append((float(sel.mean()) if sel.size else float("nan"), int(sel.size)))
    return out


def gbc(chain_kappa, layout: DesignLayout, level=0.95):
    """Granger-block causality matrix; entry ``[m, l]`` is 1 when some
    coefficient of layer l involving layer m has an interval excluding 0."""
    L = layout.n_layers
    G = np.zeros((L, L), dtype=int)
    for l, draws in enumerate(chain_kappa):
        draws = np.asarray(draws)
        if draws.shape[0] < 2:
            raise EmptyChain("at least two retained draws are needed")
        lo, hi = _intervals(draws, level)
        excl = (lo > 0) | (hi < 0)
        for m in range(L):
            if m != l and excl[:, layout.involves_layer(m)].any():
                G[m, l] = 1
    return G


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _check_chain(x, min_len=2):
    x = np.asarray(x, dtype=float).ravel()
    if x.size < min_len:
        raise EmptyChain(f"chain of length {x.size} is too short")
    if not np.all(np.isfinite(x)):
        raise ValueError("chain has non-finite values")
    if np.var(x) == 0:
        raise ConstantChain("chain has zero variance")
    return x


def autocorrelation(x, lag) -> float:
    x = _check_chain(x)
    d = x - x.mean()
    if lag >= x.size:
        return float("nan")
    return float(np.dot(d[:-lag] if lag else d, d[lag:]) / np.dot(d, d))


def spectrum0_ar(x, order_max=None) -> float:
    """Spectral density at frequency 0 from a Yule-Walker AR fit (order by AIC)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    d = x - x.mean()
    if order_max is None:
        order_max = int(min(n - 1, math.floor(10 * math.log10(n))))
    order_max = max(0, min(order_max, n - 2))
    acov = np.array([np.dot(d[: n - k], d[k:]) / n for k in range(order_max + 1)])
    if acov[0] <= 0:
        return 0.0
    best = (n * math.log(acov[0]), 0, np.zeros(0), acov[0])
    for p in range(1, order_max + 1):
        try:
            phi = solve_toeplitz(acov[:p], acov[1:p + 1])
        except np.linalg.LinAlgError:
            break
        var = acov[0] - phi @ acov[1:p + 1]
        if var <= 0:
            break
        aic = n * math.log(var) + 2 * p
        if aic < best[0]:
            best = (aic, p, phi, var)
    _, p, phi, var = best
    var_pred = var * n / (n - (p + 1))
    return float(var_pred / (1.0 - phi.sum()) ** 2)


def geweke(x, first=0.1, last=0.5) -> tuple:
    """Geweke z-score and two-sided p-value comparing early and late means."""
    x = _check_chain(x, 10)
    n = x.size
    a = x[: max(2, int(math.floor(first * n)))]
    b = x[n - max(2, int(math.floor(last * n))):]
    va = spectrum0_ar(a) / a.size
    vb = spectrum0_ar(b) / b.size
    if va + vb <= 0:
        raise ConstantChain("segments have zero spectral variance")
    z = (a.mean() - b.mean()) / math.sqrt(va + vb)
    return float(z), float(2.0 * norm.sf(abs(z)))


def pcramer(q, eps=1e-5):
    """CDF of the Cramer-von Mises statistic (series in Bessel K_{1/4})."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    out = np.zeros_like(q)
    pos = q > 0
    qp = q[pos]
    acc = np.zeros_like(qp)
    for k in range(4):
        z = np.exp(gammaln(k + 0.5) - gammaln(k + 1.0)) * math.sqrt(4 * k + 1) / (math.pi ** 1.5 * np.sqrt(qp))
        u = (4 * k + 1) ** 2 / (16.0 * qp)
        term = np.where(u > -math.log(eps), 0.0, z * np.exp(-u) * kv(0.25, np.minimum(u, 700.0)))
        acc += term
    out[pos] = acc
    return out if out.size > 1 else float(out[0])


def heidelberger_welch(x, alpha=0.05) -> tuple:
    """Stationarity test; returns ``(p_value, start_index)`` of the first passing segment."""
    x = _check_chain(x, 10)
    n = x.size
    starts = [int(round(f * n)) for f in np.arange(0.0, 0.51, 0.1)]
    p_val, used = float("nan"), 0
    for s in starts:
        y = x[s:]
        n1 = y.size
        s0 = spectrum0_ar(y[n1 // 2:])
        if s0 <= 0:
            continue
        b = np.cumsum(y) - y.mean() * np.arange(1, n1 + 1)
        stat = float(np.sum(b * b / (n1 * s0)) / n1)
        p_val, used = 1.0 - pcramer(stat), s
        if p_val > alpha:
            break
    return float(p_val), used


def diagnostics(x) -> dict:
    """AC1, AC5, Geweke and Heidelberger-Welch p-values for one scalar chain."""
    x = _check_chain(x)
    if x.size < 50:
        raise EmptyChain("at least 50 retained draws are needed for diagnostics")
    _, gp = geweke(x)
    hp, _ = heidelberger_welch(x)
    return {"ac1": autocorrelation(x, 1), "ac5": autocorrelation(x, 5), "geweke_p": gp,
            "heidelberger_p": hp}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    n_draws: int
    gbc_matrix: list
    global_ari: list = None
    mse: dict = None
    cic: list = None
    cic_count: list = None
    diagnostics: dict = field(default_factory=dict)
    alignment: list = None

    def to_dict(self):
        return asdict(self)


def _scalar_chains(chain):
    """Named scalar traces used for diagnostics."""
    ll = np.asarray(chain.loglik)
    idx = np.asarray(chain.iterations) - 1
    out = {"loglik": ll[idx] if idx.size and idx.max() < ll.size else ll[-chain.n_draws:]}
    for l, s in enumerate(chain.specs):
        Q = s.n_blocks
        mask = _unordered_mask(Q, s.directed)
        for q in range(Q):
            for r in range(Q):
                if not mask[q, r]:
                    continue
                out[f"nu[{l + 1}][{q + 1},{r + 1}]"] = chain.nu[l][:, q, r]
                if chain.beta[l] is not None:
                    for k in range(chain.beta[l].shape[3]):
                        out[f"beta[{l + 1}][{q + 1},{r + 1},{k + 1}]"] = chain.beta[l][:, q, r, k]
                    out[f"sigma2[{l + 1}][{q + 1},{r + 1}]"] = chain.sigma2[l][:, q, r]
        if chain.rho is not None:
            out[f"rho[{l + 1}]"] = chain.rho[:, l]
    return out


def evaluate(chain, truth=None, level=0.95, align=True, with_diagnostics=True) -> EvaluationReport:
    """Full report for one chain; ``truth`` is a :class:`GroundTruth` or ``None``."""
    chain.require_draws(2)
    layout = chain.layout
    rep = EvaluationReport(n_draws=chain.n_draws, gbc_matrix=gbc(chain.kappa, layout, level).tolist())
    if truth is not None:
        z_true = truth.memberships.labels
        if z_true.shape != chain.Z.shape[1:]:
            raise LengthMismatch("truth memberships do not match the chain's panel")
        z_map = map_membership(chain)
        rep.global_ari = [global_ari(z_true[l], z_map[l]) for l in range(chain.n_layers)]
        if align:
            perms = align_labels(z_map, z_true, chain.n_blocks)
            permute_chain(chain, perms)
            rep.alignment = [p.tolist() for p in perms]
        cfg = truth.config
        rep.mse = {}
        for fam in ("nu", "beta", "sigma2", "kappa"):
            vals = []
            for l, s in enumerate(chain.specs):
                if fam in ("beta", "sigma2") and not s.weighted:
                    vals.append(None)
                    continue
                vals.append(mse(chain, cfg, fam, l, truth.kappa_true.kappa))
            rep.mse[fam] = vals
        cc = cic(chain.kappa, truth.kappa_true.kappa, layout, level)
        rep.cic = [c for c, _ in cc]
        rep.cic_count = [n for _, n in cc]
    if with_diagnostics and chain.n_draws >= 50:
        for name, trace in _scalar_chains(chain).items():
            try:
                rep.diagnostics[name] = diagnostics(trace)
            except (ConstantChain, EmptyChain, ValueError):
                rep.diagnostics[name] = None
    return rep
