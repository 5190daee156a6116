"""Gibbs sampler: initialisation, sweep, and chain runs with checkpointing."""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .emission import (
    ConnectivityParams,
    PriorConfig,
    layer_loglik,
    prepare_layers,
    regression_dim,
    update_alpha,
    update_beta_sigma,
    update_nu,
)
from .errors import CorruptCheckpoint, DegenerateClustering, InvalidConfig
from .ffbs import log_transition_tables, sample_memberships
from .graph import MembershipState, MultiLayerPanel, validate_panel
from .rand import RngStream, as_generator
from .transition import (
    DesignLayout,
    ShrinkageState,
    TransitionParams,
    kappa_prior_mean,
    kappa_prior_var,
    sample_omega,
    update_kappa_row_omega,
    update_rho,
    update_zeta,
)

__all__ = [
    "FitConfig",
    "ModelState",
    "initialize",
    "kmeans_labels",
    "gibbs_sweep",
    "complete_loglik",
    "run",
    "resume",
]

PRIOR_MODES = ("normal", "group_lasso")


@dataclass
class FitConfig:
    iterations: int = 2000
    burn_in: int = 1000
    thinning: int = 1
    prior_mode: str = "group_lasso"
    priors: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0
    random_scan: bool = False
    checkpoint_every: int = 100
    feedback: bool = True
    synchronous: bool = False

    def __post_init__(self):
        if isinstance(self.priors, dict):
            self.priors = PriorConfig.from_dict(self.priors)
        if self.prior_mode not in PRIOR_MODES:
            raise InvalidConfig(f"prior_mode must be one of {PRIOR_MODES}")
        if self.iterations < 0 or self.burn_in < 0:
            raise InvalidConfig("iterations and burn_in must be nonnegative")
        if self.burn_in >= self.iterations and self.iterations > 0:
            raise InvalidConfig("burn_in must be smaller than iterations")
        if self.thinning < 1:
            raise InvalidConfig("thinning must be >= 1")
        if (self.iterations - self.burn_in) % self.thinning and self.iterations > 0:
            raise InvalidConfig("thinning must divide iterations - burn_in")
        if self.checkpoint_every < 1:
            raise InvalidConfig("checkpoint_every must be >= 1")

    @property
    def group_lasso(self):
        return self.prior_mode == "group_lasso"

    def retains(self, it):
        """Whether 1-based iteration ``it`` is kept."""
        return it > self.burn_in and (it - self.burn_in) % self.thinning == 0

    def to_dict(self):
        d = asdict(self)
        d["priors"] = self.priors.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["priors"] = PriorConfig.from_dict(d.get("priors", {}))
        return cls(**d)


@dataclass
class ModelState:
    Z: MembershipState
    params: ConnectivityParams
    kappa: TransitionParams
    shrink: ShrinkageState | None
    omega: list
    iteration: int = 0
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _repair_empty(features, labels, centers, k):
    """Move the point farthest from its centre into each empty cluster."""
    labels = labels.copy()
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if not empty.size:
            break
        dist = np.sum((features - centers[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -np.inf  # never empty another cluster
        j = int(np.argmax(dist))
        if not np.isfinite(dist[j]):
            break
        labels[j] = empty[0]
        centers[empty[0]] = features[j]
    return labels


def kmeans_labels(features, k, rng, restarts=5):
    """k-means labels (0-based) with k-means++ seeding and empty-cluster repair.

    Raises :class:`DegenerateClustering` when fewer than ``k`` distinct rows
    exist.
    """
    gen = as_generator(rng)
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if n < k or np.unique(features, axis=0).shape[0] < k:
        raise DegenerateClustering(f"cannot form {k} clusters from {n} rows")
    best, best_cost = None, np.inf
    for _ in range(restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centers, labels = kmeans2(features, k, iter=50, minit="++", rng=gen)
        labels = _repair_empty(features, labels.astype(np.int64), centers.copy(), k)
        centers = np.array([features[labels == c].mean(axis=0) for c in range(k)])
        cost = float(np.sum((features - centers[labels]) ** 2))
        if cost < best_cost - 1e-12:
            best, best_cost = labels, cost
    return best


def _layer_features(panel, l):
    dbar = panel.D[l].mean(axis=2)
    if panel.specs[l].directed:
        return np.concatenate([dbar, dbar.T], axis=1)
    return dbar


def initial_shrinkage(layout, priors: PriorConfig):
    rho = np.full(layout.n_layers, priors.iota1 * priors.iota2)
    zeta2 = []
    for l in range(layout.n_layers):
        s = layout.group_sizes(l)
        row = (s + 1.0) / (rho[l] * s)
        zeta2.append(np.tile(row, (layout.n_blocks[l] - 1, 1)))
    return ShrinkageState(zeta2, rho)


def initial_params(specs, priors: PriorConfig):
    nu, beta, sigma2, alpha = [], [], [], []
    ig_mean = (priors.e0 / 2.0) / (priors.d0 / 2.0 - 1.0) if priors.d0 > 2 else priors.e0 / priors.d0
    for s in specs:
        Q = s.n_blocks
        nu.append(np.full((Q, Q), priors.b0 / (priors.b0 + priors.c0)))
        if s.weighted:
            k = regression_dim(s)
            b0, _ = priors.beta_prior(k)
            beta.append(np.tile(b0, (Q, Q, 1)))
            sigma2.append(np.full((Q, Q), ig_mean))
        else:
            beta.append(None)
            sigma2.append(None)
        a = priors.alpha_prior(Q)
        alpha.append(a / a.sum())
    return ConnectivityParams(nu, beta, sigma2, alpha)


def initialize(panel: MultiLayerPanel, config: FitConfig, rng) -> ModelState:
    """Time-invariant k-means memberships and prior-mean parameters."""
    gen = as_generator(rng)
    layout = DesignLayout(panel.n_blocks)
    N, T = panel.n_nodes, panel.n_times
    labels = np.zeros((panel.n_layers, N, T), dtype=np.int64)
    notes = []
    for l, spec in enumerate(panel.specs):
        Q = spec.n_blocks
        try:
            lab = kmeans_labels(_layer_features(panel, l), Q, gen)
        except DegenerateClustering as exc:
            notes.append(f"layer {l + 1}: {exc}; using random balanced labels")
            lab = gen.permutation(np.arange(N) % Q)
        labels[l] = lab[:, None]
    Z = MembershipState(labels, panel.n_blocks)
    priors = config.priors
    kappa = TransitionParams([kappa_prior_mean(layout, l, priors.kappa_intercept, priors.kappa_own)
                              for l in range(layout.n_layers)])
    shrink = initial_shrinkage(layout, priors) if config.group_lasso else None
    omega = sample_omega(Z, kappa, layout, gen)
    return ModelState(Z, initial_params(panel.specs, priors), kappa, shrink, omega, 0, notes)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def _kappa_priors(layout, config: FitConfig, shrink):
    pr = config.priors
    means = [kappa_prior_mean(layout, l, pr.kappa_intercept, pr.kappa_own) for l in range(layout.n_layers)]
    if config.group_lasso:
        var = [kappa_prior_var(layout, l, pr.zeta0_sq, shrink.zeta2[l]) for l in range(layout.n_layers)]
    else:
        var = [kappa_prior_var(layout, l, pr.zeta0_sq) for l in range(layout.n_layers)]
    return means, var


def gibbs_sweep(state: ModelState, data, layout: DesignLayout, config: FitConfig, rng) -> ModelState:
    """One full sweep; updates ``state`` in place and returns it."""
    gen = as_generator(rng)
    pr = config.priors
    labels = state.Z.labels
    p = state.params
    for l, ld in enumerate(data):
        Zl = labels[l]
        if ld.weighted:
            p.beta[l], p.sigma2[l] = update_beta_sigma(ld, Zl, p.beta[l], pr, gen)
        p.nu[l] = update_nu(ld, Zl, pr, gen)
        p.alpha[l] = update_alpha(Zl[:, 0], ld.Q, pr, gen)
    means, var = _kappa_priors(layout, config, state.shrink)
    state.kappa, state.omega = update_kappa_row_omega(state.Z, means, var, state.kappa, layout, gen)
    if config.group_lasso:
        state.shrink.zeta2 = update_zeta(state.kappa, state.shrink, means, layout, gen)
        state.shrink.rho = update_rho(state.shrink.zeta2, pr.iota1, pr.iota2, layout, gen)
    tables = log_transition_tables(layout, state.kappa)
    state.Z = sample_memberships(data, state.Z, p, tables, layout, gen,
                                 random_scan=config.random_scan, synchronous=config.synchronous,
                                 feedback=config.feedback)
    state.iteration += 1
    return state


def complete_loglik(state: ModelState, data, layout: DesignLayout) -> float:
    """Joint log density of the panel and the memberships given the parameters."""
    labels = state.Z.labels
    total = 0.0
    for l, ld in enumerate(data):
        total += layer_loglik(ld, labels[l], state.params, l)
        total += float(np.sum(np.log(state.params.alpha[l])[labels[l][:, 0]]))
    if labels.shape[2] > 1:
        tables = log_transition_tables(layout, state.kappa)
        prev = np.moveaxis(labels[:, :, :-1], 0, -1) @ layout.strides
        for l, tab in enumerate(tables):
            total += float(np.sum(tab[prev, labels[l][:, 1:]]))
    return total


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run(panel: MultiLayerPanel, config: FitConfig, out_dir=None, progress=None):
    """Run a chain from scratch; optionally persist it (with checkpoints) to ``out_dir``."""
    from .store import ChainStore

    validate_panel(panel)
    rng = RngStream(config.seed, 0)
    state = initialize(panel, config, rng)
    store = ChainStore.empty(panel, config, DesignLayout(panel.n_blocks))
    store.warnings.extend(state.warnings)
    return _advance(store, state, panel, rng, config.iterations, out_dir, progress)


def _advance(store, state, panel, rng, n_iter, out_dir, progress):
    config = store.config
    layout = store.layout
    data = prepare_layers(panel)
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    try:
        for _ in range(n_iter):
            gibbs_sweep(state, data, layout, config, rng)
            store.record(state, complete_loglik(state, data, layout))
            if out_dir is not None and state.iteration % config.checkpoint_every == 0:
                store.state, store.rng_state = state, rng.get_state()
                store.save(out_dir, panel=panel)
                if progress:
                    progress(state.iteration, store)
    finally:
        store.timing["sampling_seconds"] = store.timing.get("sampling_seconds", 0.0) + time.perf_counter() - t0
    store.state, store.rng_state = state, rng.get_state()
    if out_dir is not None:
        store.save(out_dir, panel=panel)
    return store


def resume(store_path, extra_iterations: int, progress=None):
    """Continue a saved chain by ``extra_iterations`` sweeps, bit-exactly."""
    from .store import ChainStore

    path = Path(store_path)
    try:
        store = ChainStore.load(path, with_state=True)
        panel = store.load_panel(path)
    except CorruptCheckpoint:
        raise
    except Exception as exc:  # any missing/garbled file
        raise CorruptCheckpoint(f"cannot resume from {path}: {exc}") from exc
    if store.state is None:
        raise CorruptCheckpoint(f"{path} has no sampler state")
    if extra_iterations < 0:
        raise InvalidConfig("extra_iterations must be nonnegative")
    rng = RngStream(store.config.seed, 0)
    rng.set_state(store.rng_state)
    store.config.iterations = store.state.iteration + int(extra_iterations)
    if extra_iterations == 0:
        return store
    return _advance(store, store.state, panel, rng, int(extra_iterations), path, progress)
