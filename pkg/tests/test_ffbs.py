import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import chi2

from dsbmm.dgp import simulate_edges
from dsbmm.emission import ConnectivityParams, edge_loglik, prepare_layers
from dsbmm.ffbs import backward_sample, forward_filter, log_transition_tables, sample_memberships
from dsbmm.gibbs import ModelState, complete_loglik
from dsbmm.graph import LayerSpec, MembershipState
from dsbmm.rand import RngStream
from dsbmm.transition import DesignLayout, TransitionParams, build_design_row, transition_probs

from conftest import chain_close

SPECS = [LayerSpec(1, directed=True, weighted=True, n_blocks=2, covariate_dim=2),
         LayerSpec(2, directed=False, weighted=False, n_blocks=2)]


def random_instance(seed, N=None, T=None):
    gen = RngStream(seed).generator
    N = N or int(gen.integers(2, 4))
    T = T or int(gen.integers(1, 5))
    layout = DesignLayout((2, 2))
    labels = gen.integers(0, 2, (2, N, T))
    X1 = gen.normal(size=(N, N, T, 2))
    X1[..., 0] = 1.0
    nu = [gen.uniform(0.2, 0.8, (2, 2)) for _ in range(2)]
    nu[1] = np.triu(nu[1]) + np.triu(nu[1], 1).T
    beta = [gen.normal(size=(2, 2, 2)), None]
    sigma2 = [gen.uniform(0.5, 2.0, (2, 2)), None]
    alpha = [gen.dirichlet([2.0, 2.0]) for _ in range(2)]
    panel = simulate_edges(SPECS, labels, nu, beta, sigma2, [X1, np.zeros((N, N, T, 0))], gen)
    params = ConnectivityParams(nu, beta, sigma2, alpha)
    kappa = TransitionParams([gen.normal(size=(1, layout.p + 1)) for _ in range(2)])
    Z = MembershipState(labels, (2, 2))
    return panel, prepare_layers(panel), layout, Z, params, kappa, gen


def brute_factors(i, l, panel, layout, Z, params, kappa, feedback=True):
    """Emission, transition and feedback factors for node i's chain, by direct loops."""
    spec = panel.specs[l]
    N, T = panel.n_nodes, panel.n_times
    lab = Z.labels
    em = np.zeros((T, 2))
    for t in range(T):
        for q in range(2):
            for j in range(N):
                if j == i:
                    continue
                pairs = [(i, j, q, lab[l, j, t]), (j, i, lab[l, j, t], q)] if spec.directed \
                    else [(i, j, q, lab[l, j, t])]
                for a, b, za, zb in pairs:
                    x = panel.X[l][a, b, t] if spec.covariate_dim else [1.0]
                    em[t, q] += edge_loglik(panel.Y[l][a, b, t], panel.D[l][a, b, t], x, za, zb,
                                            params.nu[l], params.beta[l], params.sigma2[l],
                                            weighted=spec.weighted)
    trans = np.zeros((T, 2, 2))
    extra = np.zeros((T, 2))
    for t in range(T):
        for r in range(2):
            z = lab[:, i, t].copy()
            z[l] = r
            row = build_design_row(z, layout)
            if t + 1 < T:
                trans[t + 1, r] = np.log(transition_probs(row, kappa.kappa[l]))
                if feedback:
                    for m in range(layout.n_layers):
                        if m != l:
                            extra[t, r] += math.log(transition_probs(row, kappa.kappa[m])[lab[m, i, t + 1]])
    return em + extra, trans, np.log(params.alpha[l])


def enumerate_paths(loglik, trans, log_alpha):
    T, Q = loglik.shape
    paths = list(itertools.product(range(Q), repeat=T))
    lw = np.array([log_alpha[p[0]] + sum(loglik[t, p[t]] for t in range(T))
                   + sum(trans[t, p[t - 1], p[t]] for t in range(1, T)) for p in paths])
    return paths, np.exp(lw - logsumexp(lw))


def enumerate_filter(loglik, trans, log_alpha):
    T, Q = loglik.shape
    out = np.zeros((T, Q))
    for t in range(T):
        _, w = enumerate_paths(loglik[:t + 1], trans[:t + 1], log_alpha)
        paths = list(itertools.product(range(Q), repeat=t + 1))
        for p, pw in zip(paths, w):
            out[t, p[-1]] += pw
    return out


def path_law_from_filter(seq, path):
    T = len(path)
    prob = seq.filtered[T - 1, path[-1]]
    for t in range(T - 2, -1, -1):
        w = seq.filtered[t] * np.exp(seq.trans[t + 1, :, path[t + 1]])
        prob *= w[path[t]] / w.sum()
    return prob


def complete_path_law(i, l, data, layout, Z, params, kappa):
    T = Z.labels.shape[2]
    paths = list(itertools.product(range(2), repeat=T))
    lw = []
    for p in paths:
        lab = Z.labels.copy()
        lab[l, i] = p
        st = ModelState(MembershipState(lab, Z.n_blocks), params, kappa, None, [])
        lw.append(complete_loglik(st, data, layout))
    lw = np.array(lw)
    return paths, np.exp(lw - logsumexp(lw))


INSTANCES = list(range(100, 120))


@pytest.mark.parametrize("seed", INSTANCES)
def test_filter_and_path_law_match_enumeration(seed):
    panel, data, layout, Z, params, kappa, gen = random_instance(seed)
    i = int(gen.integers(panel.n_nodes))
    l = int(gen.integers(2))
    seq = forward_filter(i, l, data, Z, params, kappa, layout)
    loglik, trans, log_alpha = brute_factors(i, l, panel, layout, Z, params, kappa)
    assert np.abs(seq.filtered - enumerate_filter(loglik, trans, log_alpha)).max() < 1e-10
    paths, law = enumerate_paths(loglik, trans, log_alpha)
    _, law_complete = complete_path_law(i, l, data, layout, Z, params, kappa)
    assert np.abs(law - law_complete).max() < 1e-10
    from_filter = np.array([path_law_from_filter(seq, p) for p in paths])
    assert np.abs(from_filter - law).max() < 1e-10

    n = 100_000
    index = {p: k for k, p in enumerate(paths)}
    counts = np.zeros(len(paths))
    for _ in range(n):
        counts[index[tuple(backward_sample(seq, gen))]] += 1
    freq = counts / n
    se = np.sqrt(law * (1 - law) / n)
    assert np.all(np.abs(freq - law) <= 3 * se + 1e-15)
    assert chi2.sf(np.sum((counts - n * law) ** 2 / (n * law)), len(paths) - 1) > 1e-3


def test_literal_recursion_without_feedback():
    panel, data, layout, Z, params, kappa, _ = random_instance(7, N=3, T=4)
    seq = forward_filter(1, 0, data, Z, params, kappa, layout, feedback=False)
    loglik, trans, log_alpha = brute_factors(1, 0, panel, layout, Z, params, kappa, feedback=False)
    assert np.abs(seq.filtered - enumerate_filter(loglik, trans, log_alpha)).max() < 1e-10


def test_constant_emission_filter_equals_prediction():
    _, data, layout, Z, params, kappa, _ = random_instance(8, N=3, T=4)
    seq = forward_filter(0, 1, data, Z, params, kappa, layout, feedback=False,
                         emission=np.full((4, 2), -3.7))
    assert np.abs(seq.filtered - seq.predicted).max() < 1e-12


def test_single_period_is_bayes_rule():
    _, data, layout, Z, params, kappa, _ = random_instance(9, N=3, T=1)
    em = np.array([[-1.0, -2.5]])
    seq = forward_filter(2, 0, data, Z, params, kappa, layout, emission=em)
    w = params.alpha[0] * np.exp(em[0])
    assert np.abs(seq.filtered[0] - w / w.sum()).max() < 1e-12


def test_emission_shift_invariance():
    _, data, layout, Z, params, kappa, gen = random_instance(10, N=3, T=4)
    em = gen.normal(size=(4, 2))
    a = forward_filter(0, 0, data, Z, params, kappa, layout, emission=em)
    b = forward_filter(0, 0, data, Z, params, kappa, layout, emission=em + np.arange(4)[:, None] * 50.0)
    assert np.abs(a.filtered - b.filtered).max() < 1e-12


def test_frozen_parameter_sweep_targets_membership_posterior():
    panel, data, layout, Z, params, kappa, _ = random_instance(11, N=2, T=3)
    L, N, T = Z.labels.shape
    states = list(itertools.product(range(2), repeat=L * N * T))
    lw = np.empty(len(states))
    for k, s in enumerate(states):
        lab = np.array(s).reshape(L, N, T)
        lw[k] = complete_loglik(ModelState(MembershipState(lab, (2, 2)), params, kappa, None, []),
                                data, layout)
    post = np.exp(lw - logsumexp(lw))
    marg = np.tensordot(post, np.array(states, dtype=float), axes=1).reshape(L, N, T)

    tables = log_transition_tables(layout, kappa)
    rs = RngStream(12)
    n = 40_000
    trace = np.empty((n, L, N, T))
    for it in range(n):
        Z = sample_memberships(data, Z, params, tables, layout, rs)
        trace[it] = Z.labels
    for idx in np.ndindex(L, N, T):
        assert chain_close(trace[(slice(None),) + idx], marg[idx])
