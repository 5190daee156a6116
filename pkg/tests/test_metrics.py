import itertools

import numpy as np
import pytest

from dsbmm.dgp import build_preset, simulate
from dsbmm.errors import ConstantChain, EmptyChain, LengthMismatch, MissingTruth
from dsbmm.gibbs import FitConfig, run
from dsbmm.graph import LayerSpec
from dsbmm.metrics import (
    adjusted_rand_index,
    align_labels,
    autocorrelation,
    brute_force_alignment,
    cic,
    diagnostics,
    evaluate,
    gbc,
    geweke,
    map_membership,
    mse,
    permute_chain,
)
from dsbmm.rand import RngStream
from dsbmm.store import ChainStore
from dsbmm.transition import DesignLayout


def hand_chain(specs, n_nodes=2, n_times=1, R=3, **draws):
    layout = DesignLayout(tuple(s.n_blocks for s in specs))
    chain = ChainStore(specs, n_nodes, n_times, FitConfig(iterations=0, burn_in=0, prior_mode="normal"),
                       layout).freeze()
    L = len(specs)
    chain.iterations = np.arange(2, R + 2)
    chain.Z = np.zeros((R, L, n_nodes, n_times), dtype=np.uint8)
    chain.kappa = [np.zeros((R, s.n_blocks - 1, layout.p + 1)) for s in specs]
    for name, value in draws.items():
        setattr(chain, name, value)
    return chain


class Truth:
    def __init__(self, **kw):
        self.nu = kw.get("nu")
        self.beta = kw.get("beta")
        self.sigma2 = kw.get("sigma2")


@pytest.fixture(scope="module")
def fitted():
    cfg = build_preset("unidirectional", 15, 5)
    panel, truth = simulate(cfg, 15, 5, RngStream(31))
    return run(panel, FitConfig(iterations=80, burn_in=20, seed=3)).freeze(), truth


# --- partitions ---------------------------------------------------------------------

def test_ari_examples():
    assert adjusted_rand_index([1, 1, 2, 2], [1, 1, 2, 2]) == 1.0
    assert adjusted_rand_index([1, 1, 2, 2], [2, 2, 1, 1]) == 1.0
    assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(LengthMismatch):
        adjusted_rand_index([1, 2], [1, 2, 3])


def test_ari_permutation_invariance():
    gen = RngStream(1).generator
    a = gen.integers(0, 4, 200)
    b = np.where(gen.random(200) < 0.7, a, gen.integers(0, 4, 200))
    ref = adjusted_rand_index(a, b)
    assert -1 <= ref <= 1
    for perm in itertools.permutations(range(4)):
        p = np.array(perm)
        assert adjusted_rand_index(p[a], b) == pytest.approx(ref, abs=1e-12)
        assert adjusted_rand_index(a, p[b]) == pytest.approx(ref, abs=1e-12)


def test_map_membership_mode_and_ties():
    spec = [LayerSpec(1, True, False, 2)]
    z = np.array([[[[0]], ], [[[0]]], [[[1]]]], dtype=np.uint8).reshape(3, 1, 1, 1)
    z = np.concatenate([z, z[[2, 2, 0]]], axis=2)  # node 2 draws {1, 1, 0}
    chain = hand_chain(spec, n_nodes=2, n_times=1, R=3, Z=z)
    assert map_membership(chain)[0, :, 0].tolist() == [0, 1]
    tie = hand_chain(spec, n_nodes=1, n_times=1, R=2, Z=np.array([0, 1], dtype=np.uint8).reshape(2, 1, 1, 1))
    assert map_membership(tie)[0, 0, 0] == 0
    empty = hand_chain(spec, R=0)
    with pytest.raises(EmptyChain):
        map_membership(empty)


# --- parameter error ----------------------------------------------------------------

def test_mse_examples():
    spec = [LayerSpec(1, True, False, 2)]
    true = np.array([[0.5, 0.4], [0.3, 0.6]])
    exact = hand_chain(spec, nu=[np.tile(true, (3, 1, 1))])
    assert mse(exact, Truth(nu=[true]), "nu", 0) == 0.0
    shifted = hand_chain(spec, nu=[np.tile(true + 0.1, (3, 1, 1))])
    assert mse(shifted, Truth(nu=[true]), "nu", 0) == pytest.approx(0.01, abs=1e-12)
    dev = np.array([[0.1, 0.0], [0.0, 0.2]])
    mixed = hand_chain(spec, nu=[np.stack([true + dev, true + dev, true + 5 * dev])])
    assert mse(mixed, Truth(nu=[true]), "nu", 0) == pytest.approx(0.0125, abs=1e-12)
    with pytest.raises(MissingTruth):
        mse(exact, Truth(), "nu", 0)
    with pytest.raises(MissingTruth):
        mse(exact, Truth(nu=[true]), "kappa", 0)


def test_mse_undirected_uses_unordered_pairs():
    spec = [LayerSpec(1, False, False, 2)]
    true = np.array([[0.5, 0.4], [0.4, 0.6]])
    dev = np.array([[0.3, 0.0], [0.0, 0.0]])
    chain = hand_chain(spec, nu=[np.tile(true + dev, (3, 1, 1))])
    assert mse(chain, Truth(nu=[true]), "nu", 0) == pytest.approx(0.09 / 3, abs=1e-12)


def test_cic_fractions():
    layout = DesignLayout((2, 2))
    mask = layout.shrinkage_mask(0)
    gen = RngStream(2).generator
    draws = gen.uniform(-1, 1, (400, 1, layout.p + 1))
    inside = np.zeros((1, layout.p + 1))
    outside = np.full((1, layout.p + 1), 5.0)
    assert cic([draws], [inside], layout)[0] == (1.0, int(mask.sum()))
    assert cic([draws], [outside], layout)[0][0] == 0.0
    half = outside.copy()
    eligible = np.flatnonzero(mask)
    half[0, eligible[: eligible.size // 2]] = 0.0
    assert cic([draws], [half], layout)[0][0] == pytest.approx(0.5)
    with pytest.raises(EmptyChain):
        cic([draws[:0]], [inside], layout)


# --- causality ----------------------------------------------------------------------

def test_gbc_rules():
    layout = DesignLayout((2, 2, 2))
    gen = RngStream(3).generator
    null = [gen.normal(0, 1, (500, 1, layout.p + 1)) for _ in range(3)]
    assert not gbc(null, layout).any()
    col = layout.spans[(1, 2)][0]  # a coefficient of layer 1 (0-based 0) involving layers 2 and 3
    null[0][:, 0, col] = gen.uniform(0.2, 0.8, 500)
    g = gbc(null, layout)
    assert g[1, 0] == 1 and g[2, 0] == 1 and g.sum() == 2
    with pytest.raises(EmptyChain):
        gbc([k[:1] for k in null], layout)


def test_gbc_invariant_under_relabeling(fitted):
    chain, _ = fitted
    before = gbc(chain.kappa, chain.layout)
    kappa0 = [k.copy() for k in chain.kappa]
    perms = [np.array([1, 0]), np.array([2, 0, 1]), np.array([1, 2, 0])]
    permute_chain(chain, perms)
    assert np.array_equal(gbc(chain.kappa, chain.layout), before)
    permute_chain(chain, [np.argsort(p) for p in perms])
    for a, b in zip(chain.kappa, kappa0):
        assert np.abs(a - b).max() < 1e-8


# --- alignment ----------------------------------------------------------------------

def test_alignment_identity_and_swap():
    gen = RngStream(4).generator
    z = gen.integers(0, 3, (1, 20, 4))
    assert align_labels(z, z, (3,))[0].tolist() == [0, 1, 2]
    swap = np.array([1, 0, 2])
    assert align_labels(swap[z], z, (3,))[0].tolist() == [1, 0, 2]


def test_alignment_matches_brute_force():
    gen = RngStream(5).generator
    for _ in range(25):
        truth = gen.integers(0, 3, 60)
        est = np.where(gen.random(60) < 0.5, gen.permutation(3)[truth], gen.integers(0, 3, 60))
        fast = align_labels(est[None], truth[None], (3,))[0]
        slow = brute_force_alignment(est, truth, 3)
        score = lambda p: np.sum(p[est] == truth)
        assert score(fast) == score(slow)


# --- diagnostics --------------------------------------------------------------------

def test_iid_chain_calibration():
    gen = RngStream(6).generator
    good = 0
    for _ in range(100):
        x = gen.standard_normal(10_000)
        good += abs(autocorrelation(x, 1)) < 0.05 and geweke(x)[1] > 0.01
    assert good >= 95


def test_ar1_autocorrelation():
    gen = RngStream(7).generator
    e = gen.standard_normal(10_000)
    x = np.empty_like(e)
    x[0] = e[0]
    for t in range(1, x.size):
        x[t] = 0.5 * x[t - 1] + e[t]
    d = diagnostics(x)
    assert abs(d["ac1"] - 0.5) < 0.05
    assert set(d) == {"ac1", "ac5", "geweke_p", "heidelberger_p"}


def test_constant_chain_rejected():
    with pytest.raises(ConstantChain):
        diagnostics(np.full(100, 3.0))
    with pytest.raises(EmptyChain):
        diagnostics(np.arange(10.0))


# --- report -------------------------------------------------------------------------

def test_evaluate_with_and_without_truth(fitted):
    chain, truth = fitted
    rep = evaluate(chain, truth)
    assert rep.n_draws == 60
    assert all(-1 <= a <= 1 for a in rep.global_ari)
    assert all(0 <= c <= 1 for c in rep.cic)
    assert len(rep.cic_count) == 3
    assert all(v >= 0 for fam in rep.mse.values() for v in fam if v is not None)
    assert np.asarray(rep.gbc_matrix).shape == (3, 3)
    bare = evaluate(chain, None)
    assert bare.global_ari is None and bare.mse is None and bare.cic is None
    assert bare.diagnostics
