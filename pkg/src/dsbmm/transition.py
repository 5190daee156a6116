"""Saturated multinomial transition model for the latent block chains.

Each layer's label at time ``t`` is drawn from a softmax over a full dummy
expansion of the joint previous state of all layers (intercept, main
effects, and every interaction).  The last label of each layer is the
reference category with coefficients fixed at zero.

Coefficients are updated by Polya-Gamma augmentation of the binary
reductions of the multinomial likelihood; off-own-layer groups carry a
group-LASSO (scale-mixture normal) prior.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatch, StateOutOfRange, ZeroProbabilityEntry
from .rand import as_generator, sample_gig, sample_mvn_precision, sample_polya_gamma

__all__ = [
    "DesignLayout",
    "TransitionParams",
    "ShrinkageState",
    "build_design_row",
    "transition_probs",
    "layer_log_table",
    "transition_table_to_kappa",
    "kappa_prior_mean",
    "kappa_prior_var",
    "sample_omega",
    "update_kappa",
    "update_kappa_row_omega",
    "update_zeta",
    "update_rho",
    "rho_posterior_shape",
    "joint_state_index",
]


class DesignLayout:
    """Column layout of the saturated design row.

    Subsets of layers (0-based tuples) are ordered by size and then
    lexicographically; inside an interaction block the higher-numbered
    layer's level varies fastest.  Column 0 is the intercept.
    """

    def __init__(self, n_blocks):
        self.n_blocks = tuple(int(q) for q in n_blocks)
        if any(q < 1 for q in self.n_blocks):
            raise ValueError("every layer needs at least one block")
        L = len(self.n_blocks)
        self.n_layers = L
        self.subsets = [U for k in range(1, L + 1) for U in combinations(range(L), k)]
        self.sizes = [int(np.prod([self.n_blocks[m] - 1 for m in U])) for U in self.subsets]
        self.spans = {}
        start = 1
        for U, s in zip(self.subsets, self.sizes):
            self.spans[U] = (start, start + s)
            start += s
        self.p = start - 1
        self.n_states = int(np.prod(self.n_blocks))
        self.strides = np.array([int(np.prod(self.n_blocks[m + 1:])) for m in range(L)], dtype=np.int64)
        self.design = np.array([self._row(self._unravel(s)) for s in range(self.n_states)])

    def _unravel(self, s):
        return tuple(int(v) for v in np.unravel_index(s, self.n_blocks))

    def _row(self, z):
        mains = []
        for m, q in enumerate(self.n_blocks):
            v = np.zeros(q - 1)
            if z[m] != q - 1:
                v[z[m]] = 1.0
            mains.append(v)
        parts = [np.ones(1)]
        for U in self.subsets:
            block = np.ones(1)
            for m in U:
                block = np.kron(block, mains[m])
            parts.append(block)
        return np.concatenate(parts)

    @property
    def row_length(self):
        return self.p + 1

    def n_free(self):
        """Total free coefficients over all layers."""
        return sum((q - 1) * (self.p + 1) for q in self.n_blocks)

    def n_entries(self):
        """Total transition-probability entries over all layers."""
        return sum(self.n_states * q for q in self.n_blocks)

    def own_subset(self, layer):
        return (layer,)

    def groups(self, layer):
        """Subsets carrying a shrinkage group for ``layer`` (own main effect excluded)."""
        return [U for U, s in zip(self.subsets, self.sizes) if s > 0 and U != (layer,)]

    def group_sizes(self, layer):
        return np.array([self.sizes[self.subsets.index(U)] for U in self.groups(layer)], dtype=float)

    def column_labels(self):
        """``(subset, within_index)`` per column; the intercept is ``((), 0)``."""
        out = [((), 0)]
        for U, s in zip(self.subsets, self.sizes):
            out.extend((U, k) for k in range(s))
        return out

    def involves_layer(self, m):
        """Boolean mask over columns whose subset contains layer ``m``."""
        mask = np.zeros(self.p + 1, dtype=bool)
        for U in self.subsets:
            if m in U:
                a, b = self.spans[U]
                mask[a:b] = True
        return mask

    def shrinkage_mask(self, layer):
        """Columns subject to shrinkage for ``layer`` (all but intercept and own main effect)."""
        mask = np.ones(self.p + 1, dtype=bool)
        mask[0] = False
        a, b = self.spans[(layer,)]
        mask[a:b] = False
        return mask

    def to_dict(self):
        return {
            "n_blocks": list(self.n_blocks),
            "subsets": [[m + 1 for m in U] for U in self.subsets],
            "spans": [list(self.spans[U]) for U in self.subsets],
            "p": self.p,
        }


def joint_state_index(z_prev, layout: DesignLayout):
    """Flat index of a joint state (0-based labels along the last axis)."""
    z = np.asarray(z_prev, dtype=np.int64)
    return z @ layout.strides


def build_design_row(z_prev, layout: DesignLayout) -> np.ndarray:
    """Design row for a 0-based joint previous state ``z_prev`` of length L."""
    z = np.asarray(z_prev, dtype=np.int64)
    if z.shape != (layout.n_layers,):
        raise DimensionMismatch(f"joint state must have length {layout.n_layers}")
    for m, q in enumerate(layout.n_blocks):
        if not 0 <= z[m] < q:
            raise StateOutOfRange(f"layer {m + 1}: state {z[m] + 1} outside 1..{q}")
    return layout.design[int(z @ layout.strides)].copy()


@dataclass
class TransitionParams:
    """Per-layer coefficient matrices of shape ``(Q_l - 1, p + 1)``."""

    kappa: list

    def copy(self):
        return TransitionParams([k.copy() for k in self.kappa])


@dataclass
class ShrinkageState:
    """Group variances ``zeta2[l]`` of shape ``(Q_l - 1, n_groups_l)`` and rates ``rho``."""

    zeta2: list
    rho: np.ndarray

    def copy(self):
        return ShrinkageState([z.copy() for z in self.zeta2], self.rho.copy())

    def gamma(self, layout: DesignLayout, layer: int):
        return self.rho[layer] * layout.group_sizes(layer)


def _padded_scores(design, kappa_layer):
    scores = design @ kappa_layer.T
    return np.concatenate([scores, np.zeros(scores.shape[:-1] + (1,))], axis=-1)


def transition_probs(design_row, kappa_layer) -> np.ndarray:
    """Softmax probabilities over the layer's Q states (reference score 0)."""
    row = np.asarray(design_row, dtype=float)
    kap = np.atleast_2d(np.asarray(kappa_layer, dtype=float))
    if row.ndim != 1 or kap.shape[1] != row.size:
        raise DimensionMismatch(f"design row of length {row.size} does not match "
                                f"coefficients of shape {kap.shape}")
    sc = _padded_scores(row, kap)
    sc = sc - sc.max()
    e = np.exp(sc)
    return e / e.sum()


def layer_log_table(layout: DesignLayout, kappa_layer) -> np.ndarray:
    """Log transition table ``(n_states, Q_l)`` for every joint previous state."""
    sc = _padded_scores(layout.design, np.asarray(kappa_layer, dtype=float))
    return sc - logsumexp(sc, axis=1, keepdims=True)


def transition_table_to_kappa(tables, layout: DesignLayout) -> TransitionParams:
    """Exact inverse of the saturated softmax.

    ``tables[l]`` has shape ``(n_states, Q_l)``; row ``s`` is the law of the
    layer-l label given joint previous state ``s``.  Log-ratios to the
    reference column are mapped back through the (square, unit-triangular
    up to ordering) design matrix, which is inclusion-exclusion over
    subsets.
    """
    out = []
    for l, tab in enumerate(tables):
        tab = np.asarray(tab, dtype=float)
        q = layout.n_blocks[l]
        if tab.shape != (layout.n_states, q):
            raise DimensionMismatch(f"layer {l + 1}: table must be {(layout.n_states, q)}")
        if np.any(tab <= 0):
            s, k = np.argwhere(tab <= 0)[0]
            raise ZeroProbabilityEntry(f"layer {l + 1}: zero probability at state {s}, label {k + 1}")
        g = np.log(tab[:, :-1]) - np.log(tab[:, -1:])
        out.append(_inclusion_exclusion(g, layout).T.copy())
    return TransitionParams(out)


def _inclusion_exclusion(g, layout):
    """Coefficients ``(p+1, Q-1)`` reproducing log-ratios ``g`` (n_states, Q-1)."""
    ref = np.array([q - 1 for q in layout.n_blocks])
    coef = np.zeros((layout.p + 1, g.shape[1]))
    coef[0] = g[int(ref @ layout.strides)]
    for U, size in zip(layout.subsets, layout.sizes):
        if size == 0:
            continue
        a, _ = layout.spans[U]
        levels = np.array(np.unravel_index(np.arange(size), [layout.n_blocks[m] - 1 for m in U])).T
        for k, lev in enumerate(levels):
            acc = np.zeros(g.shape[1])
            for r in range(len(U) + 1):
                for V in combinations(range(len(U)), r):
                    z = ref.copy()
                    for pos in V:
                        z[U[pos]] = lev[pos]
                    acc += (-1) ** (len(U) - r) * g[int(z @ layout.strides)]
            coef[a + k] = acc
    return coef


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

def kappa_prior_mean(layout: DesignLayout, layer: int, intercept=-1.0, own_lag=1.0):
    """Prior means ``(Q_l - 1, p + 1)``: intercept, own-lag diagonal, zeros elsewhere."""
    q = layout.n_blocks[layer]
    mean = np.zeros((q - 1, layout.p + 1))
    mean[:, 0] = intercept
    a, _ = layout.spans[(layer,)]
    for k in range(q - 1):
        mean[k, a + k] = own_lag
    return mean


def kappa_prior_var(layout: DesignLayout, layer: int, zeta0_sq, zeta2=None):
    """Prior variances ``(Q_l - 1, p + 1)``.

    With ``zeta2`` None every coefficient gets ``zeta0_sq`` (normal prior);
    otherwise each shrinkage group gets its row's ``zeta2`` replicated over
    the group's columns.
    """
    q = layout.n_blocks[layer]
    var = np.full((q - 1, layout.p + 1), float(zeta0_sq))
    if zeta2 is not None:
        for g, U in enumerate(layout.groups(layer)):
            a, b = layout.spans[U]
            var[:, a:b] = zeta2[:, g:g + 1]
    return var


# ---------------------------------------------------------------------------
# Polya-Gamma updates
# ---------------------------------------------------------------------------

def _transition_data(labels, layout):
    """Joint previous states ``(N, T-1)`` and per-layer outcomes."""
    L, N, T = labels.shape
    if T < 2:
        return np.zeros((N, 0), dtype=np.int64)
    prev = np.moveaxis(labels[:, :, :-1], 0, -1)  # (N, T-1, L)
    return prev @ layout.strides


def _row_eta(scores_states, q):
    """Partial logit ``eta_q`` and normaliser ``C_q`` per joint state."""
    full = np.concatenate([scores_states, np.zeros((scores_states.shape[0], 1))], axis=1)
    others = np.delete(full, q, axis=1)
    mx = others.max(axis=1)
    c = mx + np.log(np.exp(others - mx[:, None]).sum(axis=1))
    return full[:, q] - c, c


def sample_omega(Z, kappa: TransitionParams, layout: DesignLayout, rng):
    """PG(1, eta) draws at the current coefficients, shape ``(N, T-1, Q_l-1)`` per layer."""
    labels = Z.labels if hasattr(Z, "labels") else np.asarray(Z)
    states = _transition_data(labels, layout)
    out = []
    for l, kap in enumerate(kappa.kappa):
        sc = layout.design @ kap.T
        om = np.empty(states.shape + (kap.shape[0],))
        for q in range(kap.shape[0]):
            eta, _ = _row_eta(sc, q)
            om[..., q] = sample_polya_gamma(eta[states], rng)
        out.append(om)
    return out


def _draw_row(layout, states, y_is_q, omega, c_state, prior_mean, prior_var, rng):
    """Gaussian full conditional of one coefficient row given PG weights."""
    M = layout.n_states
    W = layout.design
    a_s = np.bincount(states, weights=omega, minlength=M)
    xi_s = np.bincount(states, weights=y_is_q - 0.5, minlength=M)
    b_s = xi_s + c_state * a_s
    prec = (W.T * a_s) @ W + np.diag(1.0 / prior_var)
    rhs = W.T @ b_s + prior_mean / prior_var
    return sample_mvn_precision(prec, rhs, rng)


def row_posterior(layout, states, y_is_q, omega, c_state, prior_mean, prior_var):
    """Mean and covariance of the Gaussian full conditional of one row."""
    M = layout.n_states
    W = layout.design
    a_s = np.bincount(states, weights=omega, minlength=M)
    xi_s = np.bincount(states, weights=y_is_q - 0.5, minlength=M)
    prec = (W.T * a_s) @ W + np.diag(1.0 / prior_var)
    cov = np.linalg.inv(prec)
    mean = cov @ (W.T @ (xi_s + c_state * a_s) + prior_mean / prior_var)
    return mean, cov


def update_kappa(Z, omega, prior_mean, prior_var, kappa: TransitionParams, layout: DesignLayout, rng):
    """Draw every row from its Gaussian full conditional given fixed ``omega``.

    ``prior_mean[l]`` and ``prior_var[l]`` are ``(Q_l - 1, p + 1)`` arrays
    (see :func:`kappa_prior_mean`, :func:`kappa_prior_var`).  Rows are
    visited in order; the normaliser ``C_q`` uses the current values of the
    other rows.  The sampler itself uses :func:`update_kappa_row_omega`,
    which refreshes ``omega`` row by row.
    """
    labels = Z.labels if hasattr(Z, "labels") else np.asarray(Z)
    states = _transition_data(labels, layout).ravel()
    new = kappa.copy()
    for l, kap in enumerate(new.kappa):
        y = labels[l, :, 1:].ravel()
        for q in range(kap.shape[0]):
            _, c = _row_eta(layout.design @ kap.T, q)
            kap[q] = _draw_row(layout, states, (y == q).astype(float), omega[l][..., q].ravel(),
                               c, prior_mean[l][q], prior_var[l][q], rng)
    return new


def update_kappa_row_omega(Z, prior_mean, prior_var, kappa: TransitionParams, layout: DesignLayout,
                           rng, layers=None):
    """Row-wise blocked update: for each layer and row ``q`` draw
    ``omega_q ~ PG(1, eta_q)`` at the current coefficients, then
    ``kappa_q | omega_q``.

    Returns ``(new_kappa, omega)``; ``omega`` holds the weights used for
    each row.  Each pair of draws leaves the conditional of ``kappa_q``
    given the other rows invariant.
    """
    labels = Z.labels if hasattr(Z, "labels") else np.asarray(Z)
    st2 = _transition_data(labels, layout)
    states = st2.ravel()
    new = kappa.copy()
    omegas = []
    for l, kap in enumerate(new.kappa):
        om = np.empty(st2.shape + (kap.shape[0],))
        if layers is not None and l not in layers:
            omegas.append(om)
            continue
        y = labels[l, :, 1:].ravel()
        for q in range(kap.shape[0]):
            eta, c = _row_eta(layout.design @ kap.T, q)
            w = sample_polya_gamma(eta[states], rng) if states.size else np.zeros(0)
            om[..., q] = w.reshape(st2.shape)
            kap[q] = _draw_row(layout, states, (y == q).astype(float), w, c,
                               prior_mean[l][q], prior_var[l][q], rng)
        omegas.append(om)
    return new, omegas


def update_zeta(kappa: TransitionParams, shrink: ShrinkageState, prior_mean, layout: DesignLayout, rng):
    """Draw each group variance from GIG(1/2, rho*s(U), ||kappa_U - mean_U||^2)."""
    out = []
    for l, kap in enumerate(kappa.kappa):
        groups = layout.groups(l)
        if not groups:
            out.append(np.zeros((kap.shape[0], 0)))
            continue
        gamma = shrink.rho[l] * layout.group_sizes(l)
        ss = np.empty((kap.shape[0], len(groups)))
        for g, U in enumerate(groups):
            a, b = layout.spans[U]
            ss[:, g] = np.sum((kap[:, a:b] - prior_mean[l][:, a:b]) ** 2, axis=1)
        out.append(sample_gig(np.broadcast_to(gamma, ss.shape), ss, rng))
    return out


def rho_posterior_shape(layout: DesignLayout, layer: int, iota1: float) -> float:
    """Shape ``iota1 + sum_{q,U} (s(U) + 1) / 2`` of the rate's Gamma conditional."""
    sizes = layout.group_sizes(layer)
    return iota1 + (layout.n_blocks[layer] - 1) * float(np.sum(sizes + 1.0)) / 2.0


def update_rho(zeta2, iota1, iota2, layout: DesignLayout, rng):
    """Gamma draw of the per-layer shrinkage rate (shape, scale parameterisation)."""
    gen = as_generator(rng)
    rho = np.empty(layout.n_layers)
    for l in range(layout.n_layers):
        shape = rho_posterior_shape(layout, l, iota1)
        sizes = layout.group_sizes(l)
        rate = 1.0 / iota2 + float(np.sum(zeta2[l] * sizes)) / 2.0
        rho[l] = gen.gamma(shape, 1.0 / rate)
    return rho
