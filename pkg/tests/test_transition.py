import itertools
import math

import numpy as np
import pytest
from scipy.special import expit

from dsbmm.dgp import PRESETS, build_preset
from dsbmm.errors import DimensionMismatch, StateOutOfRange, ZeroProbabilityEntry
from dsbmm.rand import RngStream
from dsbmm.transition import (
    DesignLayout,
    ShrinkageState,
    TransitionParams,
    build_design_row,
    kappa_prior_mean,
    kappa_prior_var,
    layer_log_table,
    rho_posterior_shape,
    row_posterior,
    sample_omega,
    transition_probs,
    transition_table_to_kappa,
    update_kappa,
    update_kappa_row_omega,
    update_rho,
    update_zeta,
)

from conftest import chain_close, mc_close


# --- design ------------------------------------------------------------------

def test_design_row_reference_and_all_on():
    lay = DesignLayout((2, 2))
    assert np.array_equal(build_design_row([1, 1], lay), [1, 0, 0, 0])
    assert np.array_equal(build_design_row([0, 0], lay), [1, 1, 1, 1])


def test_preset_geometry():
    lay = DesignLayout((2, 3, 3))
    assert lay.row_length == 18 and lay.p == 17
    assert lay.n_free() == 90
    assert lay.n_entries() == 144


def test_design_row_structure():
    lay = DesignLayout((2, 3, 3))
    for z in itertools.product(range(2), range(3), range(3)):
        row = build_design_row(z, lay)
        assert row[0] == 1
        for m in range(3):
            a, b = lay.spans[(m,)]
            assert row[a:b].sum() == (0 if z[m] == lay.n_blocks[m] - 1 else 1)
        for U in lay.subsets:
            a, b = lay.spans[U]
            assert row[a:b].sum() == np.prod([row[slice(*lay.spans[(m,)])].sum() for m in U])
    assert np.array_equal(lay.design, np.array([build_design_row(np.unravel_index(s, (2, 3, 3)), lay)
                                                for s in range(18)]))


def test_interaction_order_higher_layer_fastest():
    lay = DesignLayout((3, 3))
    a, b = lay.spans[(0, 1)]
    row = build_design_row([0, 1], lay)
    # main one-hots (1,0) and (0,1): kron -> (0,1,0,0)
    assert np.array_equal(row[a:b], [0, 1, 0, 0])


def test_design_row_errors():
    lay = DesignLayout((2, 3))
    with pytest.raises(StateOutOfRange):
        build_design_row([0, 3], lay)
    with pytest.raises(DimensionMismatch):
        build_design_row([0], lay)


# --- softmax -----------------------------------------------------------------

def test_zero_kappa_is_uniform():
    lay = DesignLayout((3,))
    p = transition_probs(lay.design[0], np.zeros((2, lay.p + 1)))
    assert np.allclose(p, 1 / 3, atol=1e-15)


def test_softmax_stability():
    gen = RngStream(1).generator
    lay = DesignLayout((2, 3, 3))
    for _ in range(50):
        kap = gen.uniform(-30, 30, (2, lay.p + 1))
        for s in range(lay.n_states):
            p = transition_probs(lay.design[s], kap)
            assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


def test_softmax_permutation_of_nonreference_rows():
    gen = RngStream(2).generator
    lay = DesignLayout((3, 2))
    kap = gen.normal(size=(2, lay.p + 1))
    for s in range(lay.n_states):
        p = transition_probs(lay.design[s], kap)
        q = transition_probs(lay.design[s], kap[::-1])
        assert np.allclose(q[:2], p[1::-1], atol=1e-14) and np.isclose(q[2], p[2])


def test_softmax_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        transition_probs(np.ones(3), np.zeros((1, 4)))


# --- inversion ---------------------------------------------------------------

def test_layer1_inversion_example():
    cfg = build_preset("unidirectional", 10, 3)
    lay = cfg.layout()
    kap = transition_table_to_kappa(cfg.transitions, lay).kappa[0]
    assert np.isclose(kap[0, 0], math.log(1 / 9), atol=1e-12)
    a, _ = lay.spans[(0,)]
    assert np.isclose(kap[0, a], 2 * math.log(9), atol=1e-12)
    rest = np.delete(kap[0], [0, a])
    assert np.all(np.abs(rest) < 1e-12)


def test_uniform_table_gives_zero():
    lay = DesignLayout((2, 3))
    tabs = [np.full((6, q), 1 / q) for q in (2, 3)]
    for k in transition_table_to_kappa(tabs, lay).kappa:
        assert np.all(np.abs(k) < 1e-14)


@pytest.mark.parametrize("preset", PRESETS)
def test_preset_round_trip(preset):
    cfg = build_preset(preset, 10, 3)
    lay = cfg.layout()
    kappa = transition_table_to_kappa(cfg.transitions, lay)
    assert sum(k.size for k in kappa.kappa) == 90
    for tab, k in zip(cfg.transitions, kappa.kappa):
        assert np.max(np.abs(np.exp(layer_log_table(lay, k)) - tab)) < 1e-10


def test_random_tables_round_trip_and_match_linear_solve():
    gen = RngStream(3).generator
    lay = DesignLayout((3, 2, 2))
    tabs = [gen.dirichlet(np.ones(q), size=lay.n_states) for q in lay.n_blocks]
    kappa = transition_table_to_kappa(tabs, lay)
    for tab, k in zip(tabs, kappa.kappa):
        assert np.max(np.abs(np.exp(layer_log_table(lay, k)) - tab)) < 1e-10
        g = np.log(tab[:, :-1] / tab[:, -1:])
        assert np.allclose(np.linalg.solve(lay.design, g).T, k, atol=1e-10)


def test_zero_probability_entry():
    lay = DesignLayout((2,))
    with pytest.raises(ZeroProbabilityEntry):
        transition_table_to_kappa([np.array([[1.0, 0.0], [0.5, 0.5]])], lay)


def test_prior_mean_layout():
    lay = DesignLayout((2, 3, 3))
    m = kappa_prior_mean(lay, 1)
    a, _ = lay.spans[(1,)]
    assert np.all(m[:, 0] == -1)
    assert m[0, a] == 1 and m[1, a + 1] == 1 and m[0, a + 1] == 0
    assert m.sum() == -2 + 2


# --- Polya-Gamma updates ------------------------------------------------------

def test_omega_at_zero_kappa():
    lay = DesignLayout((2,))
    Z = RngStream(4).generator.integers(0, 2, (1, 200, 60))
    om = sample_omega(Z, TransitionParams([np.zeros((1, 2))]), lay, RngStream(5))
    assert om[0].shape == (200, 59, 1)
    assert abs(om[0].mean() - 0.25) < 0.005


def test_omega_shape_and_determinism():
    lay = DesignLayout((3,))
    Z = np.array([[[0, 2]]])
    kap = TransitionParams([np.zeros((2, lay.p + 1))])
    a = sample_omega(Z, kap, lay, RngStream(6))
    b = sample_omega(Z, kap, lay, RngStream(6))
    assert a[0].shape == (1, 1, 2)
    assert np.array_equal(a[0], b[0]) and np.all(a[0] > 0)


def _closed_form(rows, ys, omegas, cs, m, v):
    """Bayesian linear regression algebra written out observation by observation."""
    P = np.diag(1.0 / v)
    h = m / v
    for x, y, w, c in zip(rows, ys, omegas, cs):
        P = P + w * np.outer(x, x)
        h = h + x * ((y - 0.5) + w * c)
    cov = np.linalg.inv(P)
    return cov @ h, cov


def test_row_posterior_two_dimensional_oracle():
    lay = DesignLayout((2,))
    Z = np.array([[[0, 1]]])  # N=1, T=2
    states = np.array([0])
    omega = np.array([0.37])
    m = np.array([-1.0, 1.0])
    v = np.array([10.0, 10.0])
    mean, cov = row_posterior(lay, states, np.array([0.0]), omega, np.array([0.0, 0.0]), m, v)
    om, oc = _closed_form([lay.design[0]], [0.0], omega, [0.0], m, v)
    assert np.allclose(mean, om, atol=1e-10, rtol=0) and np.allclose(cov, oc, atol=1e-10, rtol=0)
    # hand algebra: precision diag(0.1)+0.37*11'
    P = np.array([[0.47, 0.37], [0.37, 0.47]])
    hand_cov = np.linalg.inv(P)
    assert np.allclose(cov, hand_cov, atol=1e-12)
    assert np.allclose(mean, hand_cov @ np.array([-0.1 - 0.5, 0.1 - 0.5]), atol=1e-12)


def test_row_posterior_multi_row_oracle():
    gen = RngStream(7).generator
    lay = DesignLayout((3, 2))
    Z = np.stack([gen.integers(0, 3, (4, 5)), gen.integers(0, 2, (4, 5))])
    kap = TransitionParams([gen.normal(size=(2, lay.p + 1)), gen.normal(size=(1, lay.p + 1))])
    states = (np.moveaxis(Z[:, :, :-1], 0, -1) @ lay.strides).ravel()
    y = Z[0, :, 1:].ravel()
    omega = gen.gamma(2.0, 0.2, states.size)
    full = np.concatenate([lay.design @ kap.kappa[0].T, np.zeros((lay.n_states, 1))], axis=1)
    c_state = np.log(np.exp(full[:, 1:]).sum(axis=1))  # row q=0
    m = gen.normal(size=lay.p + 1)
    v = gen.uniform(0.5, 3.0, lay.p + 1)
    mean, cov = row_posterior(lay, states, (y == 0).astype(float), omega, c_state, m, v)
    om, oc = _closed_form(lay.design[states], (y == 0), omega, c_state[states], m, v)
    assert np.allclose(mean, om, atol=1e-10, rtol=0) and np.allclose(cov, oc, atol=1e-10, rtol=0)


def test_update_kappa_empty_data_is_prior():
    lay = DesignLayout((2,))
    Z = np.zeros((1, 3, 1), dtype=int)  # T=1: no transitions
    m = [kappa_prior_mean(lay, 0)]
    v = [kappa_prior_var(lay, 0, 4.0)]
    g = RngStream(8)
    omega = [np.zeros((3, 0, 1))]
    draws = np.array([update_kappa(Z, omega, m, v, TransitionParams([m[0].copy()]), lay, g).kappa[0][0]
                      for _ in range(20_000)])
    assert mc_close(draws[:, 0], -1.0) and mc_close(draws[:, 1], 1.0)
    assert mc_close((draws[:, 0] + 1) ** 2, 4.0)


def test_update_kappa_flat_prior_is_weighted_least_squares():
    gen = RngStream(9).generator
    lay = DesignLayout((2,))
    Z = gen.integers(0, 2, (1, 40, 6))
    states = Z[0, :, :-1].ravel()
    y = (Z[0, :, 1:].ravel() == 0).astype(float)
    omega = gen.gamma(3.0, 0.1, states.size)
    mean, _ = row_posterior(lay, states, y, omega, np.zeros(2), np.zeros(2), np.full(2, 1e12))
    X = lay.design[states]
    W = np.diag(omega)
    wls = np.linalg.solve(X.T @ W @ X, X.T @ W @ ((y - 0.5) / omega))
    assert np.allclose(mean, wls, atol=1e-6)


def test_update_kappa_draws_match_row_posterior():
    gen = RngStream(10).generator
    lay = DesignLayout((2,))
    Z = gen.integers(0, 2, (1, 8, 4))
    m = [kappa_prior_mean(lay, 0)]
    v = [kappa_prior_var(lay, 0, 10.0)]
    kap = TransitionParams([np.array([[0.3, -0.2]])])
    omega = sample_omega(Z, kap, lay, RngStream(11))
    states = Z[0, :, :-1].ravel()
    y = (Z[0, :, 1:].ravel() == 0).astype(float)
    mean, cov = row_posterior(lay, states, y, omega[0][..., 0].ravel(), np.zeros(2), m[0][0], v[0][0])
    g = RngStream(12)
    draws = np.array([update_kappa(Z, omega, m, v, kap, lay, g).kappa[0][0] for _ in range(20_000)])
    for j in range(2):
        assert mc_close(draws[:, j], mean[j])
        assert mc_close((draws[:, j] - mean[j]) ** 2, cov[j, j])


def test_kappa_subchain_matches_grid_posterior():
    """Single node, Q=2, T=3, fixed memberships: the (omega, kappa) chain
    targets the exact logistic posterior, computed here on a dense grid."""
    lay = DesignLayout((2,))
    Z = np.array([[[0, 0, 1]]])
    m = [kappa_prior_mean(lay, 0)]
    v = [kappa_prior_var(lay, 0, 10.0)]

    grid = np.linspace(-22, 22, 1201)
    k0, k1 = np.meshgrid(grid, grid, indexing="ij")
    # observations: from state 0 (row (1,1)) to 0 then to 1
    eta = k0 + k1
    loglik = np.log(expit(eta)) + np.log(expit(-eta))
    logprior = -((k0 + 1) ** 2 + (k1 - 1) ** 2) / 20.0
    w = np.exp(loglik + logprior - (loglik + logprior).max())
    w /= w.sum()
    target = {"m0": (w * k0).sum(), "m1": (w * k1).sum(),
              "s0": (w * k0 ** 2).sum(), "s1": (w * k1 ** 2).sum()}

    kap = TransitionParams([m[0].copy()])
    g = RngStream(13)
    n = 100_000
    draws = np.empty((n, 2))
    for it in range(n):
        kap, _ = update_kappa_row_omega(Z, m, v, kap, lay, g)
        draws[it] = kap.kappa[0][0]
    assert chain_close(draws[:, 0], target["m0"])
    assert chain_close(draws[:, 1], target["m1"])
    assert chain_close(draws[:, 0] ** 2, target["s0"])
    assert chain_close(draws[:, 1] ** 2, target["s1"])


# --- shrinkage ----------------------------------------------------------------

def test_gamma_definition():
    lay = DesignLayout((3, 3))
    sh = ShrinkageState([np.ones((2, 2)), np.ones((2, 2))], np.array([1.0, 1.0]))
    assert list(lay.group_sizes(0)) == [2.0, 4.0]
    assert np.allclose(sh.gamma(lay, 0), [2.0, 4.0])


def test_zeta_at_prior_mean_is_gamma():
    lay = DesignLayout((3, 3))
    means = [kappa_prior_mean(lay, l) for l in range(2)]
    kap = TransitionParams([m.copy() for m in means])
    sh = ShrinkageState([np.ones((2, 2)), np.ones((2, 2))], np.array([1.0, 1.0]))
    g = RngStream(14)
    draws = np.array([update_zeta(kap, sh, means, lay, g)[0] for _ in range(20_000)])
    assert np.all(draws > 0)
    # Gamma(1/2, rate gamma/2) has mean 1/gamma; gamma = (2, 4) here
    assert mc_close(draws[:, 0, 0], 0.5) and mc_close(draws[:, 1, 1], 0.25)


def test_rho_shape_example():
    lay = DesignLayout((2, 3, 3))
    assert rho_posterior_shape(lay, 1, 1.0) == 1.0 + 21.0
    assert rho_posterior_shape(lay, 2, 0.5) == 0.5 + 21.0


def test_rho_scale_limit():
    lay = DesignLayout((2, 2))
    zeros = [np.zeros((1, 2)), np.zeros((1, 2))]
    g = RngStream(15)
    draws = np.array([update_rho(zeros, 1.0, 0.6, lay, g) for _ in range(20_000)])
    shape = rho_posterior_shape(lay, 0, 1.0)
    assert np.all(draws > 0)
    assert mc_close(draws[:, 0], shape * 0.6)
