"""Synthetic panels with known block dynamics.

Three reference scenarios share the same connectivity parameters and differ
only in how the layers' transitions depend on each other:

* ``no_causality``: every layer evolves on its own;
* ``unidirectional``: layer 3 drives layer 2;
* ``bidirectional``: layers 2 and 3 drive each other.

Layer 1 is weighted/directed with 2 blocks, layer 2 weighted/directed with
3 blocks, layer 3 unweighted/undirected with 3 blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .emission import regression_dim
from .errors import InvalidConfig, TooFewNodes, UnknownPreset
from .graph import LayerSpec, MembershipState, MultiLayerPanel
from .rand import as_generator
from .transition import DesignLayout, TransitionParams, transition_table_to_kappa

__all__ = [
    "GeneratorConfig",
    "GroundTruth",
    "PRESETS",
    "build_preset",
    "true_gbc",
    "simulate",
    "simulate_edges",
    "default_covariate_law",
    "gravity_covariate_law",
    "build_trade",
]

PRESETS = ("no_causality", "unidirectional", "bidirectional")


@dataclass
class GeneratorConfig:
    """Generator parameters; labels are 0-based.

    ``transitions[l]`` has shape ``(n_states, Q_l)``: row ``s`` is the law
    of layer l's next label given the flat joint previous state ``s`` (last
    layer varying fastest).  ``beta[l]`` has shape ``(Q, Q, k)`` where ``k``
    is the covariate dimension (or 1 for an intercept-only layer).
    """

    specs: list
    alpha: list
    nu: list
    beta: list
    sigma2: list
    transitions: list
    covariate_law: Optional[Callable] = None

    @property
    def n_blocks(self):
        return tuple(s.n_blocks for s in self.specs)

    def layout(self):
        return DesignLayout(self.n_blocks)

    def validate(self):
        L = len(self.specs)
        for name in ("alpha", "nu", "beta", "sigma2", "transitions"):
            if len(getattr(self, name)) != L:
                raise InvalidConfig(f"{name} needs one entry per layer")
        M = int(np.prod(self.n_blocks))
        for l, s in enumerate(self.specs):
            Q = s.n_blocks
            a = np.asarray(self.alpha[l], dtype=float)
            if a.shape != (Q,) or np.any(a < 0) or abs(a.sum() - 1) > 1e-12:
                raise InvalidConfig(f"layer {l + 1}: alpha must be a simplex of length {Q}")
            nu = np.asarray(self.nu[l], dtype=float)
            if nu.shape != (Q, Q) or np.any(nu <= 0) or np.any(nu >= 1):
                raise InvalidConfig(f"layer {l + 1}: nu must be a {Q}x{Q} matrix in (0, 1)")
            tab = np.asarray(self.transitions[l], dtype=float)
            if tab.shape != (M, Q):
                raise InvalidConfig(f"layer {l + 1}: transitions must have shape {(M, Q)}")
            if np.any(tab <= 0) or (Q > 1 and np.any(tab >= 1)):
                raise InvalidConfig(f"layer {l + 1}: transition entries must lie in (0, 1)")
            if np.max(np.abs(tab.sum(axis=1) - 1)) > 1e-12:
                raise InvalidConfig(f"layer {l + 1}: transition rows must sum to 1")
            sym = [nu]
            if s.weighted:
                k = regression_dim(s)
                beta = np.asarray(self.beta[l], dtype=float)
                s2 = np.asarray(self.sigma2[l], dtype=float)
                if beta.shape != (Q, Q, k):
                    raise InvalidConfig(f"layer {l + 1}: beta must have shape {(Q, Q, k)}")
                if s2.shape != (Q, Q) or np.any(s2 <= 0):
                    raise InvalidConfig(f"layer {l + 1}: sigma2 must be a positive {Q}x{Q} matrix")
                sym += [beta, s2]
            if not s.directed:
                for arr in sym:
                    if not np.allclose(arr, np.swapaxes(arr, 0, 1), rtol=0, atol=0):
                        raise InvalidConfig(f"layer {l + 1}: undirected parameters must be symmetric")

    def to_dict(self):
        def lst(x):
            return None if x is None else np.asarray(x, dtype=float).tolist()

        return {
            "specs": [s.to_dict() for s in self.specs],
            "alpha": [lst(a) for a in self.alpha],
            "nu": [lst(a) for a in self.nu],
            "beta": [lst(a) for a in self.beta],
            "sigma2": [lst(a) for a in self.sigma2],
            "transitions": [lst(a) for a in self.transitions],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            specs = [LayerSpec.from_dict(s) for s in d["specs"]]
            arr = lambda x: None if x is None else np.asarray(x, dtype=float)
            cfg = cls(
                specs=specs,
                alpha=[arr(a) for a in d["alpha"]],
                nu=[arr(a) for a in d["nu"]],
                beta=[arr(a) for a in d.get("beta", [None] * len(specs))],
                sigma2=[arr(a) for a in d.get("sigma2", [None] * len(specs))],
                transitions=[arr(a) for a in d["transitions"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"malformed generator config: {exc}") from exc
        for l, s in enumerate(cfg.specs):
            if s.weighted and cfg.beta[l] is not None and cfg.beta[l].ndim == 2:
                cfg.beta[l] = cfg.beta[l][..., None]
        return cfg


@dataclass
class GroundTruth:
    memberships: MembershipState
    kappa_true: TransitionParams
    config: GeneratorConfig

    def causality(self, tol=1e-9) -> np.ndarray:
        """True causality matrix implied by the coefficients: entry (m, l) is 1
        when some coefficient of layer l involving layer m is nonzero."""
        layout = self.config.layout()
        L = layout.n_layers
        g = np.zeros((L, L), dtype=int)
        for l, k in enumerate(self.kappa_true.kappa):
            for m in range(L):
                if m != l and np.any(np.abs(k[:, layout.involves_layer(m)]) > tol):
                    g[m, l] = 1
        return g

    def to_dict(self, preset=None):
        """JSON form with 1-based memberships shaped (N, T, L)."""
        return {
            "preset": preset,
            "n_nodes": int(self.memberships.labels.shape[1]),
            "n_times": int(self.memberships.labels.shape[2]),
            "memberships": self.memberships.to_one_based().tolist(),
            "kappa": [np.asarray(k).tolist() for k in self.kappa_true.kappa],
            "causality": self.causality().tolist(),
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            config = GeneratorConfig.from_dict(d["config"])
            z = np.asarray(d["memberships"], dtype=np.int64)
            memberships = MembershipState.from_one_based(z, config.n_blocks)
            kappa = TransitionParams([np.asarray(k, dtype=float) for k in d["kappa"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"malformed truth record: {exc}") from exc
        return cls(memberships, kappa, config)


# ---------------------------------------------------------------------------
# Reference presets
# ---------------------------------------------------------------------------

# Own-layer transition matrices indexed by the conditioning block of the
# driving layer; rows are the own previous block.
_DRIVEN = np.array([
    [[0.95, 0.025, 0.025],
     [0.34, 0.65, 0.01],
     [0.34, 0.01, 0.65]],
    [[0.65, 0.34, 0.01],
     [0.025, 0.95, 0.025],
     [0.01, 0.34, 0.65]],
    [[0.65, 0.01, 0.34],
     [0.01, 0.65, 0.34],
     [0.025, 0.025, 0.95]],
])
_M1 = np.array([[0.9, 0.1], [0.1, 0.9]])
_M3 = np.full((3, 3), 0.01) + np.eye(3) * 0.97
_OWN3 = np.full((3, 3), 0.025) + np.eye(3) * 0.925


def _preset_connectivity():
    specs = [
        LayerSpec(1, directed=True, weighted=True, n_blocks=2),
        LayerSpec(2, directed=True, weighted=True, n_blocks=3),
        LayerSpec(3, directed=False, weighted=False, n_blocks=3),
    ]
    alpha = [np.array([0.5, 0.5]), np.full(3, 1 / 3), np.full(3, 1 / 3)]
    nu = [
        np.array([[0.9, 0.6], [0.5, 0.8]]),
        np.array([[0.9, 0.3, 0.35], [0.25, 0.9, 0.2], [0.45, 0.48, 0.9]]),
        np.array([[0.9, 0.275, 0.4], [0.275, 0.8, 0.34], [0.4, 0.34, 0.7]]),
    ]
    beta = [
        np.array([[1.0, -0.15], [0.35, 0.40]])[..., None],
        np.array([[0.6, 0.4, 0.2], [0.9, 1.5, 1.2], [-0.5, -0.3, -0.1]])[..., None],
        None,
    ]
    sigma2 = [
        np.array([[0.010, 0.015], [0.035, 0.040]]),
        np.array([[0.06, 0.04, 0.02], [0.09, 0.15, 0.012], [0.05, 0.03, 0.01]]),
        None,
    ]
    return specs, alpha, nu, beta, sigma2


def _table(n_blocks, layer, rule):
    """Tabulate ``rule(z_prev) -> row`` over all joint previous states."""
    M = int(np.prod(n_blocks))
    tab = np.empty((M, n_blocks[layer]))
    for s in range(M):
        tab[s] = rule(np.unravel_index(s, n_blocks))
    return tab


def build_preset(name: str, n_nodes: int, n_times: int) -> GeneratorConfig:
    if name not in PRESETS:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    specs, alpha, nu, beta, sigma2 = _preset_connectivity()
    n_blocks = tuple(s.n_blocks for s in specs)
    if n_nodes < 2 * max(n_blocks):
        raise TooFewNodes(f"need at least {2 * max(n_blocks)} nodes, got {n_nodes}")
    if n_times < 2:
        raise InvalidConfig("need at least 2 time points")
    layer1 = lambda z: _M1[z[0]]
    if name == "no_causality":
        layer2 = lambda z: _OWN3[z[1]]
        layer3 = lambda z: _M3[z[2]]
    elif name == "unidirectional":
        layer2 = lambda z: _DRIVEN[z[2]][z[1]]
        layer3 = lambda z: _M3[z[2]]
    else:
        layer2 = lambda z: _DRIVEN[z[2]][z[1]]
        layer3 = lambda z: _DRIVEN[z[1]][z[2]]
    transitions = [_table(n_blocks, l, rule) for l, rule in enumerate((layer1, layer2, layer3))]
    return GeneratorConfig(specs, alpha, nu, beta, sigma2, transitions)


def true_gbc(name: str) -> np.ndarray:
    """Causality matrix of a preset: entry (m, l) is 1 when layer m drives layer l."""
    g = np.zeros((3, 3), dtype=int)
    if name == "unidirectional":
        g[2, 1] = 1
    elif name == "bidirectional":
        g[2, 1] = g[1, 2] = 1
    elif name != "no_causality":
        raise UnknownPreset(name)
    return g


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def default_covariate_law(gen, n_nodes, n_times, dim):
    """Constant first column, i.i.d. standard normal remaining columns."""
    X = gen.standard_normal((n_nodes, n_nodes, n_times, dim))
    X[..., 0] = 1.0
    return X


def gravity_covariate_law(gen, n_nodes, n_times, dim):
    """Gravity-style dyad covariates ``(1, gdp_i, gdp_j, dist_ij)``.

    Log GDP follows a per-node random walk around a node-specific level;
    distance is the Euclidean distance between fixed random node locations
    (constant over time).
    """
    if dim != 4:
        raise InvalidConfig("the gravity covariate law produces exactly 4 columns")
    level = gen.normal(0.0, 1.0, n_nodes)
    steps = gen.normal(0.02, 0.05, (n_nodes, n_times))
    steps[:, 0] = 0.0
    gdp = level[:, None] + np.cumsum(steps, axis=1)
    loc = gen.random((n_nodes, 2))
    dist = np.sqrt(((loc[:, None, :] - loc[None, :, :]) ** 2).sum(-1))
    X = np.empty((n_nodes, n_nodes, n_times, 4))
    X[..., 0] = 1.0
    X[..., 1] = gdp[:, None, :]
    X[..., 2] = gdp[None, :, :]
    X[..., 3] = dist[:, :, None]
    return X


def build_trade(n_agreement_blocks: int = 2) -> GeneratorConfig:
    """Two-layer trade scenario: a weighted directed flow layer with a
    core-periphery structure and gravity covariates, and a binary directed
    agreement layer whose memberships drive the flow layer's transitions."""
    Qa = int(n_agreement_blocks)
    if Qa < 1:
        raise InvalidConfig("the agreement layer needs at least one block")
    specs = [
        LayerSpec(1, directed=True, weighted=True, n_blocks=2, covariate_dim=4),
        LayerSpec(2, directed=True, weighted=False, n_blocks=Qa),
    ]
    # (intercept, exporter gdp, importer gdp, distance) per block pair
    beta = np.array([
        [[-1.0, 0.9, 0.8, -0.6], [0.2, 0.8, 0.5, -0.9]],
        [[0.0, 0.5, 0.7, -1.0], [0.5, 0.4, 0.4, -1.4]],
    ])
    sigma2 = np.array([[0.05, 0.08], [0.08, 0.1]])
    nu1 = np.array([[0.95, 0.7], [0.6, 0.3]])
    nu2 = np.full((Qa, Qa), 0.1) + np.eye(Qa) * 0.7
    n_blocks = (2, Qa)
    own_a = np.full((Qa, Qa), 0.05 / max(Qa - 1, 1)) + np.eye(Qa) * (0.95 - 0.05 / max(Qa - 1, 1))
    if Qa == 1:
        own_a = np.ones((1, 1))

    def flow(z):
        # agreement block 0 pulls nodes towards the core
        stay = 0.9 if z[1] == 0 else 0.7
        return np.array([stay, 1 - stay]) if z[0] == 0 else np.array([0.3, 0.7]) if z[1] == 0 else np.array([0.05, 0.95])

    transitions = [_table(n_blocks, 0, flow), _table(n_blocks, 1, lambda z: own_a[z[1]])]
    return GeneratorConfig(
        specs,
        alpha=[np.array([0.4, 0.6]), np.full(Qa, 1.0 / Qa)],
        nu=[nu1, nu2],
        beta=[beta, None],
        sigma2=[sigma2, None],
        transitions=transitions,
        covariate_law=gravity_covariate_law,
    )


def _categorical_rows(probs, u):
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def simulate(config: GeneratorConfig, n_nodes: int, n_times: int, rng):
    """Draw memberships and a panel; returns ``(panel, truth)``."""
    config.validate()
    gen = as_generator(rng)
    N, T = int(n_nodes), int(n_times)
    if N < 1 or T < 1:
        raise InvalidConfig("n_nodes and n_times must be positive")
    specs = config.specs
    L = len(specs)
    layout = config.layout()
    Z = np.empty((L, N, T), dtype=np.int64)
    for l in range(L):
        Z[l, :, 0] = _categorical_rows(np.tile(config.alpha[l], (N, 1)), gen.random(N))
    for t in range(1, T):
        s = np.moveaxis(Z[:, :, t - 1], 0, -1) @ layout.strides
        for l in range(L):
            Z[l, :, t] = _categorical_rows(np.asarray(config.transitions[l])[s], gen.random(N))

    law = config.covariate_law or default_covariate_law
    iu = np.triu_indices(N, k=1)
    Xs = []
    for spec in specs:
        if spec.covariate_dim > 0:
            X = np.array(law(gen, N, T, spec.covariate_dim), dtype=float)
            X[np.arange(N), np.arange(N)] = 0.0  # self-dyads carry no edges
            Xs.append(_mirror_upper(X, iu) if not spec.directed else X)
        else:
            Xs.append(np.zeros((N, N, T, 0)))
    panel = simulate_edges(specs, Z, config.nu, config.beta, config.sigma2, Xs, gen)
    truth = GroundTruth(
        memberships=MembershipState(Z, config.n_blocks),
        kappa_true=transition_table_to_kappa(config.transitions, layout),
        config=config,
    )
    return panel, truth


def simulate_edges(specs, labels, nu, beta, sigma2, X, rng) -> MultiLayerPanel:
    """Draw edges and weights given 0-based memberships ``labels`` (L, N, T).

    ``X[l]`` holds layer l's covariates ``(N, N, T, covariate_dim)``.
    Undirected layers draw each unordered pair once and mirror it.
    """
    gen = as_generator(rng)
    labels = np.asarray(labels, dtype=np.int64)
    _, N, T = labels.shape
    Ys, Ds = [], []
    for l, spec in enumerate(specs):
        D = np.zeros((N, N, T), dtype=np.uint8)
        Y = np.zeros((N, N, T))
        nu_l = np.asarray(nu[l], dtype=float)
        for t in range(T):
            zt = labels[l, :, t]
            d = gen.random((N, N)) < nu_l[zt[:, None], zt[None, :]]
            np.fill_diagonal(d, False)
            if not spec.directed:
                d = np.triu(d, k=1)
                d = d | d.T
            D[:, :, t] = d
            if spec.weighted:
                b = np.asarray(beta[l], dtype=float)
                s2 = np.asarray(sigma2[l], dtype=float)
                xt = X[l][:, :, t] if spec.covariate_dim > 0 else np.ones((N, N, 1))
                mu = np.einsum("ijk,ijk->ij", xt, b[zt[:, None], zt[None, :]])
                sd = np.sqrt(s2[zt[:, None], zt[None, :]])
                logy = mu + sd * gen.standard_normal((N, N))
                if not spec.directed:
                    logy = np.triu(logy, k=1)
                    logy = logy + logy.T
                Y[:, :, t] = np.where(d, np.exp(logy), 0.0)
            else:
                Y[:, :, t] = d
        Ys.append(Y)
        Ds.append(D)
    X = [np.asarray(x, dtype=float) for x in X]
    return MultiLayerPanel(N, T, list(specs), Ys, Ds, X)


def _mirror_upper(X, iu):
    out = X.copy()
    out[iu[1], iu[0]] = X[iu[0], iu[1]]
    return out
