"""Forward-filter backward-sample updates of the latent block chains.

A node's chain in layer l is drawn jointly over time given the other nodes'
chains in that layer and the node's own chains in the other layers.  By
default the target includes the factors through which the node's layer-l
state conditions the other layers' next transitions; ``feedback=False``
drops them (the literal recursion, kept for comparison).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .emission import _kernel_args, prepare_layers
from .errors import NumericalUnderflow
from .graph import MembershipState, MultiLayerPanel
from .rand import as_generator
from .transition import TransitionParams, layer_log_table

__all__ = [
    "FilterSequence",
    "log_transition_tables",
    "forward_filter",
    "backward_sample",
    "sample_memberships",
]


@dataclass
class FilterSequence:
    """Normalised prediction and filter rows, ``(T, Q)`` each.

    ``trans[t, r, q]`` holds the log transition weights used at step t and
    is needed for backward sampling.
    """

    predicted: np.ndarray
    filtered: np.ndarray
    trans: np.ndarray


def log_transition_tables(layout, kappa: TransitionParams):
    return [layer_log_table(layout, k) for k in kappa.kappa]


def _flat(log_tables):
    flat = np.concatenate([t.ravel() for t in log_tables])
    offsets = np.cumsum([0] + [t.size for t in log_tables[:-1]]).astype(np.int64)
    return flat, offsets


def _layers(data):
    return prepare_layers(data) if isinstance(data, MultiLayerPanel) else data


def _node_terms(i, layer, data, Z, params, log_tables, layout, feedback):
    ld = data[layer]
    labels = np.ascontiguousarray(Z.labels, dtype=np.int64)
    T = labels.shape[2]
    Q = layout.n_blocks[layer]
    lognu, log1mnu, beta, sigma2 = _kernel_args(ld, params, layer)
    em = np.empty((T, Q))
    _kernels.node_emission(int(i), ld.D, ld.logY, ld.X, labels[layer], lognu, log1mnu,
                           beta, sigma2, ld.weighted, ld.directed, em)
    flat, offsets = _flat(log_tables)
    trans = np.zeros((T, Q, Q))
    extra = np.empty((T, Q))
    log_alpha = np.log(np.asarray(params.alpha[layer], dtype=float))
    _kernels.node_transition_terms(int(i), layer, labels, layout.strides, flat, offsets,
                                   np.array(layout.n_blocks, dtype=np.int64), log_alpha,
                                   bool(feedback), trans, extra)
    return em + extra, trans, log_alpha


def forward_filter(i, layer, data, Z: MembershipState, params, kappa: TransitionParams, layout,
                   feedback=True, emission=None) -> FilterSequence:
    """Prediction/filter recursion for node ``i`` in ``layer`` (0-based).

    ``emission`` optionally overrides the ``(T, Q)`` log-likelihood table
    (the cross-layer feedback terms are still added).
    """
    data = _layers(data)
    log_tables = log_transition_tables(layout, kappa)
    loglik, trans, log_alpha = _node_terms(i, layer, data, Z, params, log_tables, layout, feedback)
    if emission is not None:
        T, Q = loglik.shape
        em_default, _, _ = _node_terms(i, layer, data, Z, params, log_tables, layout, False)
        loglik = loglik - em_default + np.asarray(emission, dtype=float).reshape(T, Q)
    pred = np.empty_like(loglik)
    filt = np.empty_like(loglik)
    if not _kernels.forward_filter_kernel(log_alpha, trans, loglik, pred, filt):
        raise NumericalUnderflow(f"filter degenerated for node {i + 1} in layer {layer + 1}")
    return FilterSequence(pred, filt, trans)


def backward_sample(seq: FilterSequence, rng) -> np.ndarray:
    """Draw a 0-based path from the smoothed joint law encoded by ``seq``."""
    gen = as_generator(rng)
    T = seq.filtered.shape[0]
    path = np.empty(T, dtype=np.int64)
    u = gen.random(T)
    if not _kernels.backward_sample_kernel(seq.filtered, seq.trans, u, path):
        raise NumericalUnderflow("backward sampling met an all-zero row")
    return path


def sample_memberships(data, Z: MembershipState, params, log_tables, layout, rng,
                       random_scan=False, synchronous=False, feedback=True, layers=None):
    """One FFBS sweep over layers (ascending) and nodes.

    ``log_tables`` are the per-layer log transition tables (see
    :func:`log_transition_tables`).  With ``synchronous`` every node is
    updated from the pre-sweep state (an approximation, faster to
    parallelise, not the exact Gibbs kernel).
    """
    data = _layers(data)
    gen = as_generator(rng)
    labels = np.ascontiguousarray(Z.labels, dtype=np.int64).copy()
    L, N, T = labels.shape
    flat, offsets = _flat(log_tables)
    n_blocks = np.array(layout.n_blocks, dtype=np.int64)
    read = labels.copy() if synchronous else labels
    for layer in range(L):
        if layers is not None and layer not in layers:
            continue
        ld = data[layer]
        if ld.Q == 1:
            continue
        order = gen.permutation(N).astype(np.int64) if random_scan else np.arange(N, dtype=np.int64)
        uniforms = gen.random((N, T))
        lognu, log1mnu, beta, sigma2 = _kernel_args(ld, params, layer)
        log_alpha = np.log(np.asarray(params.alpha[layer], dtype=float))
        bad = _kernels.sweep_layer(layer, order, read, labels, ld.D, ld.logY, ld.X, lognu, log1mnu,
                                   beta, sigma2, ld.weighted, ld.directed, layout.strides, flat,
                                   offsets, n_blocks, log_alpha, bool(feedback), uniforms)
        if bad >= 0:
            raise NumericalUnderflow(f"filter degenerated for node {bad + 1} in layer {layer + 1}")
    return MembershipState(labels, Z.n_blocks)
