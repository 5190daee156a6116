"""Dynamic multi-layer network panels: data model, validation and CSV I/O.

Block labels are stored 0-based internally; every file and user-facing
interface uses 1-based node, time and block indices.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AsymmetricUndirectedLayer,
    DuplicateDyadTime,
    IndexOutOfRange,
    IoError,
    NonPositiveWeight,
    ParseError,
    SelfLoopPresent,
    StateOutOfRange,
    WeightIndicatorMismatch,
)

__all__ = [
    "LayerSpec",
    "MultiLayerPanel",
    "MembershipState",
    "validate_panel",
    "load_panel",
    "load_panel_dir",
    "save_panel",
]


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    directed: bool
    weighted: bool
    n_blocks: int
    covariate_dim: int = 0

    def __post_init__(self):
        if int(self.n_blocks) < 1:
            raise ValueError("n_blocks must be >= 1")
        if int(self.covariate_dim) < 0:
            raise ValueError("covariate_dim must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                layer_id=int(d["layer_id"]),
                directed=bool(d["directed"]),
                weighted=bool(d["weighted"]),
                n_blocks=int(d["n_blocks"]),
                covariate_dim=int(d.get("covariate_dim", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad layer spec {d!r}: {exc}") from exc


@dataclass
class MultiLayerPanel:
    """Observed dynamic multi-layer network.

    ``Y[l]`` and ``D[l]`` are ``(N, N, T)`` arrays; ``X[l]`` is
    ``(N, N, T, covariate_dim)``.
    """

    n_nodes: int
    n_times: int
    specs: list
    Y: list
    D: list
    X: list = field(default_factory=list)

    def __post_init__(self):
        self.specs = list(self.specs)
        L = len(self.specs)
        if len(self.Y) != L or len(self.D) != L:
            raise ValueError("Y and D need one tensor per layer")
        if not self.X:
            self.X = [np.zeros((self.n_nodes, self.n_nodes, self.n_times, s.covariate_dim))
                      for s in self.specs]
        self.Y = [np.asarray(y, dtype=float) for y in self.Y]
        self.D = [np.asarray(d).astype(np.uint8) for d in self.D]
        self.X = [np.asarray(x, dtype=float) for x in self.X]
        shape = (self.n_nodes, self.n_nodes, self.n_times)
        for l, s in enumerate(self.specs):
            if self.Y[l].shape != shape or self.D[l].shape != shape:
                raise ValueError(f"layer {l + 1}: tensors must have shape {shape}")
            if self.X[l].shape != shape + (s.covariate_dim,):
                raise ValueError(f"layer {l + 1}: covariates must have shape "
                                 f"{shape + (s.covariate_dim,)}")

    @property
    def n_layers(self):
        return len(self.specs)

    @property
    def n_blocks(self):
        return tuple(int(s.n_blocks) for s in self.specs)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.n_nodes, self.n_times,
                             [s.to_dict() for s in self.specs]]).encode())
        for l in range(self.n_layers):
            for arr in (self.D[l], self.Y[l], self.X[l]):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class MembershipState:
    """Block labels for every (layer, node, time), 0-based.

    ``labels`` has shape ``(L, N, T)``.  Use :meth:`from_one_based` /
    :meth:`to_one_based` to convert from or to the ``(N, T, L)`` 1-based
    layout used in files.
    """

    def __init__(self, labels, n_blocks):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.n_blocks = tuple(int(q) for q in n_blocks)
        if self.labels.ndim != 3 or self.labels.shape[0] != len(self.n_blocks):
            raise ValueError("labels must have shape (L, N, T)")
        for l, q in enumerate(self.n_blocks):
            lab = self.labels[l]
            if lab.size and (lab.min() < 0 or lab.max() >= q):
                raise StateOutOfRange(f"layer {l + 1}: labels outside 1..{q}")

    @classmethod
    def from_one_based(cls, z, n_blocks):
        z = np.asarray(z, dtype=np.int64)
        return cls(np.transpose(z, (2, 0, 1)) - 1, n_blocks)

    def to_one_based(self):
        return np.transpose(self.labels, (1, 2, 0)) + 1

    def copy(self):
        return MembershipState(self.labels.copy(), self.n_blocks)

    def __eq__(self, other):
        return (isinstance(other, MembershipState) and self.n_blocks == other.n_blocks
                and np.array_equal(self.labels, other.labels))


def _first(mask):
    idx = np.argwhere(mask)
    return tuple(int(v) + 1 for v in idx[0])


def validate_panel(panel: MultiLayerPanel) -> None:
    """Raise on the first violated panel invariant (1-based ``(l, i, j, t)``)."""
    N = panel.n_nodes
    diag = np.arange(N)
    for l, spec in enumerate(panel.specs):
        Y, D = panel.Y[l], panel.D[l]
        lid = l + 1
        loops = (D[diag, diag, :] != 0) | (Y[diag, diag, :] != 0)
        if loops.any():
            i, t = _first(loops)
            raise SelfLoopPresent(f"self-loop at (layer={lid}, i={i}, j={i}, t={t})")
        if np.any((D != 0) & (D != 1)):
            i, j, t = _first((D != 0) & (D != 1))
            raise WeightIndicatorMismatch(f"non-binary indicator at (layer={lid}, i={i}, j={j}, t={t})")
        if not np.all(np.isfinite(Y)):
            i, j, t = _first(~np.isfinite(Y))
            raise NonPositiveWeight(f"non-finite weight at (layer={lid}, i={i}, j={j}, t={t})")
        if spec.weighted:
            bad = (Y != 0) != (D == 1)
            if bad.any():
                i, j, t = _first(bad)
                raise WeightIndicatorMismatch(
                    f"weight/indicator mismatch at (layer={lid}, i={i}, j={j}, t={t})")
            neg = (D == 1) & (Y <= 0)
            if neg.any():
                i, j, t = _first(neg)
                raise NonPositiveWeight(f"non-positive weight at (layer={lid}, i={i}, j={j}, t={t})")
        else:
            bad = Y != D
            if bad.any():
                i, j, t = _first(bad)
                raise WeightIndicatorMismatch(
                    f"unweighted layer needs Y == D at (layer={lid}, i={i}, j={j}, t={t})")
        if not spec.directed:
            asym = (D != D.transpose(1, 0, 2)) | (Y != Y.transpose(1, 0, 2))
            if asym.any():
                i, j, t = _first(asym)
                raise AsymmetricUndirectedLayer(
                    f"asymmetric undirected layer at (layer={lid}, i={i}, j={j}, t={t})")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _read_specs(spec_file):
    try:
        with open(spec_file) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {spec_file}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{spec_file}: invalid JSON ({exc})") from exc
    dims = {}
    if isinstance(raw, dict):
        dims = {k: raw[k] for k in ("n_nodes", "n_times") if k in raw}
        raw = raw.get("layers")
    if not isinstance(raw, list) or not raw:
        raise ParseError(f"{spec_file}: expected a non-empty array of layer specs")
    specs = [LayerSpec.from_dict(d) for d in raw]
    specs.sort(key=lambda s: s.layer_id)
    if [s.layer_id for s in specs] != list(range(1, len(specs) + 1)):
        raise ParseError(f"{spec_file}: layer ids must be 1..L")
    return specs, dims


def _read_rows(path, expected_prefix, n_values):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        header = [h.strip() for h in header]
        if header[:3] != expected_prefix[:3] or (n_values is not None and len(header) != 3 + n_values):
            raise ParseError(f"{path}: row 1: unexpected header {header}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ParseError(f"{path}: row {lineno}: expected {width} columns, got {len(row)}")
            try:
                idx = [int(c) for c in row[:3]]
            except ValueError:
                col = next(k for k, c in enumerate(row[:3]) if not c.strip().lstrip("-").isdigit())
                raise ParseError(f"{path}: row {lineno}, column {col + 1}: not an integer") from None
            vals = []
            for k, c in enumerate(row[3:]):
                try:
                    vals.append(float(c))
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {k + 4}: not a number") from None
            rows.append((lineno, idx, vals))
    return rows


def _check_index(path, lineno, i, j, t, N, T):
    if not (1 <= i <= N and 1 <= j <= N and 1 <= t <= T):
        raise IndexOutOfRange(f"{path}: row {lineno}: index ({i},{j},{t}) outside N={N}, T={T}")


def load_panel(edge_files, spec_file, covariate_files=None, n_nodes=None, n_times=None):
    """Build a validated panel from per-layer edge CSVs (``i,j,t,y``).

    Undirected layers may list each unordered pair once or both orientations
    (which must then agree).  Missing rows mean ``D = Y = 0``.  When the
    dimensions are not given they are taken from spec.json (object form)
    or inferred from the largest indices present.
    """
    specs, dims = _read_specs(spec_file)
    if len(edge_files) != len(specs):
        raise ParseError(f"{len(specs)} layers declared but {len(edge_files)} edge files given")
    covariate_files = list(covariate_files) if covariate_files else [None] * len(specs)
    if len(covariate_files) != len(specs):
        raise ParseError("one covariate file (or None) per layer is required")

    edge_rows = [_read_rows(p, ["i", "j", "t", "y"], 1) for p in edge_files]
    cov_rows = [_read_rows(p, ["i", "j", "t"], s.covariate_dim) if p else []
                for p, s in zip(covariate_files, specs)]
    N = n_nodes if n_nodes is not None else dims.get("n_nodes")
    T = n_times if n_times is not None else dims.get("n_times")
    if N is None or T is None:
        mi = mt = 0
        for rows in edge_rows + cov_rows:
            for _, (i, j, t), _ in rows:
                mi, mt = max(mi, i, j), max(mt, t)
        N = N if N is not None else mi
        T = T if T is not None else mt
    N, T = int(N), int(T)

    Ys, Ds, Xs = [], [], []
    for spec, path, rows, cpath, crows in zip(specs, edge_files, edge_rows, covariate_files, cov_rows):
        Y = np.zeros((N, N, T))
        D = np.zeros((N, N, T), dtype=np.uint8)
        seen = set()
        for lineno, (i, j, t), (y,) in rows:
            _check_index(path, lineno, i, j, t, N, T)
            if i == j:
                raise SelfLoopPresent(f"{path}: row {lineno}: self-loop at "
                                      f"(layer={spec.layer_id}, i={i}, j={j}, t={t})")
            if (i, j, t) in seen:
                raise DuplicateDyadTime(f"{path}: row {lineno}: duplicate dyad-time ({i},{j},{t})")
            seen.add((i, j, t))
            if spec.weighted and y <= 0:
                raise NonPositiveWeight(f"{path}: row {lineno}: weight {y} must be positive "
                                        f"(layer={spec.layer_id}, i={i}, j={j}, t={t})")
            if not spec.weighted and y != 1:
                raise WeightIndicatorMismatch(f"{path}: row {lineno}: unweighted layer needs y=1")
            val = y if spec.weighted else 1.0
            cells = [(i, j)] if spec.directed else [(i, j), (j, i)]
            for a, b in cells:
                if not spec.directed and (a, b) != (i, j) and (a, b, t) in seen:
                    if Y[a - 1, b - 1, t - 1] != val:
                        raise AsymmetricUndirectedLayer(
                            f"{path}: row {lineno}: conflicting orientations for ({i},{j},{t})")
                D[a - 1, b - 1, t - 1] = 1
                Y[a - 1, b - 1, t - 1] = val
        X = np.zeros((N, N, T, spec.covariate_dim))
        cseen = set()
        for lineno, (i, j, t), vals in crows:
            _check_index(cpath, lineno, i, j, t, N, T)
            if (i, j, t) in cseen:
                raise DuplicateDyadTime(f"{cpath}: row {lineno}: duplicate dyad-time ({i},{j},{t})")
            cseen.add((i, j, t))
            X[i - 1, j - 1, t - 1] = vals
            if not spec.directed and (j, i, t) not in cseen:
                X[j - 1, i - 1, t - 1] = vals
        Ys.append(Y)
        Ds.append(D)
        Xs.append(X)
    panel = MultiLayerPanel(N, T, specs, Ys, Ds, Xs)
    validate_panel(panel)
    return panel


def _fmt(v):
    return repr(float(v))


def save_panel(panel: MultiLayerPanel, directory) -> None:
    """Write ``spec.json``, ``layer_<l>.csv`` and ``covariates_<l>.csv``.

    Floats are written with round-trip precision; undirected layers list
    each unordered pair once (``i < j``).
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        if not os.access(directory, os.W_OK):
            raise PermissionError(f"{directory} is not writable")
        spec_doc = {
            "n_nodes": panel.n_nodes,
            "n_times": panel.n_times,
            "layers": [s.to_dict() for s in panel.specs],
        }
        with open(directory / "spec.json", "w") as fh:
            json.dump(spec_doc, fh, indent=2)
        for l, spec in enumerate(panel.specs):
            D = panel.D[l]
            with open(directory / f"layer_{spec.layer_id}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["i", "j", "t", "y"])
                for t in range(panel.n_times):
                    ii, jj = np.nonzero(D[:, :, t])
                    for i, j in zip(ii, jj):
                        if not spec.directed and i > j:
                            continue
                        w.writerow([i + 1, j + 1, t + 1, _fmt(panel.Y[l][i, j, t])])
            if spec.covariate_dim:
                X = panel.X[l]
                with open(directory / f"covariates_{spec.layer_id}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["i", "j", "t"] + [f"x{k + 1}" for k in range(spec.covariate_dim)])
                    for t in range(panel.n_times):
                        for i in range(panel.n_nodes):
                            for j in range(panel.n_nodes):
                                if i == j or (not spec.directed and i > j):
                                    continue
                                w.writerow([i + 1, j + 1, t + 1] + [_fmt(v) for v in X[i, j, t]])
    except OSError as exc:
        raise IoError(f"cannot write panel to {directory}: {exc}") from exc


def load_panel_dir(directory) -> MultiLayerPanel:
    """Load a panel written by :func:`save_panel`."""
    directory = Path(directory)
    spec_file = directory / "spec.json"
    if not spec_file.is_file():
        raise IoError(f"{spec_file} not found")
    specs, _ = _read_specs(spec_file)
    edges = [directory / f"layer_{s.layer_id}.csv" for s in specs]
    covs = []
    for s in specs:
        p = directory / f"covariates_{s.layer_id}.csv"
        covs.append(p if s.covariate_dim and p.exists() else None)
    return load_panel(edges, spec_file, covs)
