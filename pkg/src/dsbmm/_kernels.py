"""Compiled inner loops (emission sums and forward-filter/backward-sample).

The kernels are deterministic: randomness enters only through uniforms drawn
by the caller from a numpy Generator.
"""
import math

import numpy as np
from numba import njit

_LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def _edge_ll(d, logy, x, q, r, lognu, log1mnu, beta, sigma2, weighted):
    if d == 0:
        return log1mnu[q, r]
    if not weighted:
        return lognu[q, r]
    mu = 0.0
    for k in range(x.shape[0]):
        mu += x[k] * beta[q, r, k]
    s2 = sigma2[q, r]
    dev = logy - mu
    return lognu[q, r] - logy - 0.5 * (_LOG_2PI + math.log(s2)) - dev * dev / (2.0 * s2)


@njit(cache=True)
def node_emission(i, D, logY, X, Zl, lognu, log1mnu, beta, sigma2, weighted, directed, out):
    """Fill ``out[t, q]`` with node i's edge log-likelihood if it sits in block q.

    Edges are first reduced to per-block sufficient statistics (counts and
    regression moments), so each candidate block costs O(Q k^2) rather than
    O(N).
    """
    N = D.shape[0]
    T = D.shape[2]
    Q = lognu.shape[0]
    k = X.shape[3]
    nd = 2 if directed else 1
    n_abs = np.empty((nd, Q))
    n_pre = np.empty((nd, Q))
    s_y = np.empty((nd, Q))
    s_yy = np.empty((nd, Q))
    s_xy = np.empty((nd, Q, k))
    s_xx = np.empty((nd, Q, k, k))
    half_log = np.empty((Q, Q))
    for q in range(Q):
        for r in range(Q):
            half_log[q, r] = 0.5 * (_LOG_2PI + math.log(sigma2[q, r]))
    for t in range(T):
        n_abs[:] = 0.0
        n_pre[:] = 0.0
        s_y[:] = 0.0
        s_yy[:] = 0.0
        s_xy[:] = 0.0
        s_xx[:] = 0.0
        for j in range(N):
            if j == i:
                continue
            r = Zl[j, t]
            for side in range(nd):
                a_, b_ = (i, j) if side == 0 else (j, i)
                if D[a_, b_, t] == 0:
                    n_abs[side, r] += 1.0
                    continue
                n_pre[side, r] += 1.0
                if weighted:
                    ly = logY[a_, b_, t]
                    s_y[side, r] += ly
                    s_yy[side, r] += ly * ly
                    for u in range(k):
                        xu = X[a_, b_, t, u]
                        s_xy[side, r, u] += xu * ly
                        for v in range(k):
                            s_xx[side, r, u, v] += xu * X[a_, b_, t, v]
        for q in range(Q):
            acc = 0.0
            for side in range(nd):
                for r in range(Q):
                    qq, rr = (q, r) if side == 0 else (r, q)
                    acc += n_abs[side, r] * log1mnu[qq, rr] + n_pre[side, r] * lognu[qq, rr]
                    if weighted and n_pre[side, r] > 0.0:
                        quad = s_yy[side, r]
                        for u in range(k):
                            bu = beta[qq, rr, u]
                            quad -= 2.0 * bu * s_xy[side, r, u]
                            for v in range(k):
                                quad += bu * s_xx[side, r, u, v] * beta[qq, rr, v]
                        acc += (-s_y[side, r] - n_pre[side, r] * half_log[qq, rr]
                                - quad / (2.0 * sigma2[qq, rr]))
            out[t, q] = acc


@njit(cache=True)
def layer_emission_total(D, logY, X, Zl, lognu, log1mnu, beta, sigma2, weighted, directed):
    """Sum of edge log-likelihoods over ordered (directed) or unordered pairs."""
    N = D.shape[0]
    T = D.shape[2]
    acc = 0.0
    for t in range(T):
        for i in range(N):
            for j in range(N):
                if j == i or (not directed and j < i):
                    continue
                acc += _edge_ll(D[i, j, t], logY[i, j, t], X[i, j, t], Zl[i, t], Zl[j, t],
                                lognu, log1mnu, beta, sigma2, weighted)
    return acc


@njit(cache=True)
def _joint(Z, strides, i, t, layer, value):
    s = 0
    for m in range(Z.shape[0]):
        v = value if m == layer else Z[m, i, t]
        s += v * strides[m]
    return s


@njit(cache=True)
def node_transition_terms(i, layer, Z, strides, log_tables_flat, table_offsets, n_blocks,
                          log_alpha, feedback, trans, extra):
    """Transition and cross-layer feedback terms for one node's chain.

    ``trans[t, r, q]`` (t >= 1) is log P(Z_t = q | Z_{t-1} = r, other layers at t-1).
    ``extra[t, q]`` collects log P(other layers at t+1 | joint state at t with
    this layer at q) when ``feedback`` is set.
    """
    L = Z.shape[0]
    T = Z.shape[2]
    Q = n_blocks[layer]
    off = table_offsets[layer]
    Ql = n_blocks[layer]
    for t in range(1, T):
        for r in range(Q):
            s = _joint(Z, strides, i, t - 1, layer, r)
            for q in range(Q):
                trans[t, r, q] = log_tables_flat[off + s * Ql + q]
    for t in range(T):
        for q in range(Q):
            extra[t, q] = 0.0
    if feedback:
        for t in range(T - 1):
            for q in range(Q):
                s = _joint(Z, strides, i, t, layer, q)
                acc = 0.0
                for m in range(L):
                    if m == layer:
                        continue
                    acc += log_tables_flat[table_offsets[m] + s * n_blocks[m] + Z[m, i, t + 1]]
                extra[t, q] = acc


@njit(cache=True)
def forward_filter_kernel(log_alpha, trans, loglik, pred, filt):
    """Normalised prediction and filter rows; returns False on underflow."""
    T, Q = loglik.shape
    for t in range(T):
        if t == 0:
            for q in range(Q):
                pred[0, q] = math.exp(log_alpha[q])
        else:
            for q in range(Q):
                acc = 0.0
                for r in range(Q):
                    acc += filt[t - 1, r] * math.exp(trans[t, r, q])
                pred[t, q] = acc
        tot = 0.0
        for q in range(Q):
            tot += pred[t, q]
        if not tot > 0.0:
            return False
        for q in range(Q):
            pred[t, q] /= tot
        mx = -np.inf
        for q in range(Q):
            if pred[t, q] > 0.0 and loglik[t, q] > mx:
                mx = loglik[t, q]
        if mx == -np.inf:
            return False
        tot = 0.0
        for q in range(Q):
            v = pred[t, q] * math.exp(loglik[t, q] - mx) if pred[t, q] > 0.0 else 0.0
            filt[t, q] = v
            tot += v
        if not tot > 0.0:
            return False
        for q in range(Q):
            filt[t, q] /= tot
    return True


@njit(cache=True)
def _draw(w, u):
    Q = w.shape[0]
    tot = 0.0
    for q in range(Q):
        tot += w[q]
    target = u * tot
    acc = 0.0
    last = -1
    for q in range(Q):
        if w[q] > 0.0:
            last = q
            acc += w[q]
            if target < acc:
                return q
    return last


@njit(cache=True)
def backward_sample_kernel(filt, trans, uniforms, out):
    """Draw a path from the smoothed joint law; returns False on a zero row."""
    T, Q = filt.shape
    w = np.empty(Q)
    k = _draw(filt[T - 1], uniforms[T - 1])
    if k < 0:
        return False
    out[T - 1] = k
    for t in range(T - 2, -1, -1):
        nxt = out[t + 1]
        for r in range(Q):
            w[r] = filt[t, r] * math.exp(trans[t + 1, r, nxt])
        k = _draw(w, uniforms[t])
        if k < 0:
            return False
        out[t] = k
    return True


@njit(cache=True)
def sweep_layer(layer, order, Zread, Zwrite, D, logY, X, lognu, log1mnu, beta, sigma2,
                weighted, directed, strides, log_tables_flat, table_offsets, n_blocks,
                log_alpha, feedback, uniforms):
    """FFBS update of every node's chain in one layer, in ``order``.

    In sequential mode ``Zread`` and ``Zwrite`` are the same array.  Returns
    the failing node index, or -1 on success.
    """
    T = Zread.shape[2]
    Q = n_blocks[layer]
    em = np.empty((T, Q))
    trans = np.zeros((T, Q, Q))
    extra = np.empty((T, Q))
    pred = np.empty((T, Q))
    filt = np.empty((T, Q))
    path = np.empty(T, dtype=np.int64)
    for idx in range(order.shape[0]):
        i = order[idx]
        node_emission(i, D, logY, X, Zread[layer], lognu, log1mnu, beta, sigma2,
                      weighted, directed, em)
        node_transition_terms(i, layer, Zread, strides, log_tables_flat, table_offsets,
                              n_blocks, log_alpha, feedback, trans, extra)
        for t in range(T):
            for q in range(Q):
                em[t, q] += extra[t, q]
        if not forward_filter_kernel(log_alpha, trans, em, pred, filt):
            return i
        if not backward_sample_kernel(filt, trans, uniforms[i], path):
            return i
        for t in range(T):
            Zwrite[layer, i, t] = path[t]
    return -1
