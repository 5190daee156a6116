"""Retained posterior draws and their on-disk layout.

A chain directory holds

* ``meta.json``: fit configuration, design layout, panel digest, sampler RNG
  state, content digest and timing;
* ``draws/<family>.csv``: long-format draws with an ``iteration`` column
  (labels 1-based, values written with round-trip precision);
* ``z_draws.bin``: packed memberships: magic ``DSBMMZ01``, then N, T, L as
  little-endian uint32, one byte per layer holding Q, then uint8 labels
  (0-based) in (draw, layer, time, node) order;
* ``state.npz`` and ``panel.npz``: sampler checkpoint and the fitted data.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .emission import ConnectivityParams, regression_dim
from .errors import CorruptCheckpoint, EmptyChain, IoError
from .gibbs import FitConfig, ModelState
from .graph import LayerSpec, MembershipState, MultiLayerPanel
from .transition import DesignLayout, ShrinkageState, TransitionParams

__all__ = ["ChainStore", "Z_MAGIC"]

Z_MAGIC = b"DSBMMZ01"
FORMAT = "dsbmm-chain/1"


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    return repr(float(v))


class ChainStore:
    """Thinned post-burn-in draws of one chain.

    Per-layer draw arrays have the retained draw as leading axis:
    ``kappa[l]`` is ``(R, Q-1, p+1)``, ``nu[l]`` ``(R, Q, Q)``, ``beta[l]``
    ``(R, Q, Q, k)`` (``None`` for unweighted layers), ``alpha[l]``
    ``(R, Q)``, ``zeta2[l]`` ``(R, Q-1, G)``; ``rho`` is ``(R, L)`` and ``Z``
    ``(R, L, N, T)`` with 0-based labels.  ``loglik`` has one entry per
    iteration, burn-in included.
    """

    def __init__(self, specs, n_nodes, n_times, config: FitConfig, layout: DesignLayout,
                 panel_digest=""):
        self.specs = list(specs)
        self.n_nodes = int(n_nodes)
        self.n_times = int(n_times)
        self.config = config
        self.layout = layout
        self.panel_digest = panel_digest
        L = len(self.specs)
        self.iterations = []
        self.kappa = [[] for _ in range(L)]
        self.nu = [[] for _ in range(L)]
        self.beta = [[] for _ in range(L)]
        self.sigma2 = [[] for _ in range(L)]
        self.alpha = [[] for _ in range(L)]
        self.zeta2 = [[] for _ in range(L)]
        self.rho = []
        self.Z = []
        self.loglik = []
        self.timing = {}
        self.warnings = []
        self.state = None
        self.rng_state = None
        self._frozen = False

    @classmethod
    def empty(cls, panel: MultiLayerPanel, config: FitConfig, layout: DesignLayout):
        return cls(panel.specs, panel.n_nodes, panel.n_times, config, layout, panel.digest())

    @property
    def n_layers(self):
        return len(self.specs)

    @property
    def n_blocks(self):
        return tuple(s.n_blocks for s in self.specs)

    @property
    def n_draws(self):
        return len(self.iterations)

    @property
    def group_lasso(self):
        return self.config.group_lasso

    # ------------------------------------------------------------------
    def _thaw(self):
        if self._frozen:
            for name in ("kappa", "nu", "beta", "sigma2", "alpha", "zeta2"):
                setattr(self, name, [list(a) if a is not None else [] for a in getattr(self, name)])
            self.rho = list(self.rho) if self.rho is not None else []
            self.Z = list(self.Z)
            self.iterations = list(self.iterations)
            self.loglik = list(self.loglik)
            self._frozen = False

    def record(self, state: ModelState, loglik: float):
        self._thaw()
        self.loglik.append(float(loglik))
        if not self.config.retains(state.iteration):
            return
        self.iterations.append(state.iteration)
        p = state.params
        for l in range(self.n_layers):
            self.kappa[l].append(state.kappa.kappa[l].copy())
            self.nu[l].append(np.array(p.nu[l], dtype=float))
            self.alpha[l].append(np.array(p.alpha[l], dtype=float))
            if self.specs[l].weighted:
                self.beta[l].append(np.array(p.beta[l], dtype=float))
                self.sigma2[l].append(np.array(p.sigma2[l], dtype=float))
            if self.group_lasso:
                self.zeta2[l].append(state.shrink.zeta2[l].copy())
        if self.group_lasso:
            self.rho.append(state.shrink.rho.copy())
        self.Z.append(state.Z.labels.astype(np.uint8))

    def freeze(self):
        """Convert the draw lists to stacked arrays (idempotent)."""
        if self._frozen:
            return self
        L = self.n_layers
        R = len(self.iterations)
        lay = self.layout
        stack = lambda xs, shape: np.array(xs, dtype=float).reshape((R,) + shape)
        self.iterations = np.array(self.iterations, dtype=np.int64)
        for l, s in enumerate(self.specs):
            Q = s.n_blocks
            self.kappa[l] = stack(self.kappa[l], (Q - 1, lay.p + 1))
            self.nu[l] = stack(self.nu[l], (Q, Q))
            self.alpha[l] = stack(self.alpha[l], (Q,))
            if s.weighted:
                self.beta[l] = stack(self.beta[l], (Q, Q, regression_dim(s)))
                self.sigma2[l] = stack(self.sigma2[l], (Q, Q))
            else:
                self.beta[l] = None
                self.sigma2[l] = None
            if self.group_lasso:
                self.zeta2[l] = stack(self.zeta2[l], (Q - 1, len(lay.groups(l))))
            else:
                self.zeta2[l] = None
        self.rho = stack(self.rho, (L,)) if self.group_lasso else None
        self.Z = (np.array(self.Z, dtype=np.uint8).reshape(R, L, self.n_nodes, self.n_times)
                  if R else np.zeros((0, L, self.n_nodes, self.n_times), dtype=np.uint8))
        self.loglik = np.array(self.loglik, dtype=float)
        self._frozen = True
        return self

    def require_draws(self, k=1):
        self.freeze()
        if self.n_draws < k:
            raise EmptyChain(f"chain has {self.n_draws} retained draws, need at least {k}")

    # ------------------------------------------------------------------
    # Serialisation
    # ------------------------------------------------------------------
    def _csv_tables(self):
        """Yield ``(family, header, rows)`` for every draw file."""
        self.freeze()
        it = self.iterations
        labels = self.layout.column_labels()

        def subset_name(U):
            return "0" if not U else "-".join(str(m + 1) for m in U)

        rows = []
        for r, i in enumerate(it):
            for l in range(self.n_layers):
                kap = self.kappa[l][r]
                for q in range(kap.shape[0]):
                    for c, (U, w) in enumerate(labels):
                        rows.append((int(i), l + 1, q + 1, subset_name(U), w + 1, _fmt(kap[q, c])))
        yield "kappa", ["iteration", "layer", "q", "subset", "index", "value"], rows

        def qr_table(arrs, weighted_only):
            out = []
            for r, i in enumerate(it):
                for l, s in enumerate(self.specs):
                    if arrs[l] is None:
                        continue
                    a = arrs[l][r]
                    for q in range(a.shape[0]):
                        for rr in range(a.shape[1]):
                            out.append((int(i), l + 1, q + 1, rr + 1, _fmt(a[q, rr])))
            return out

        yield "nu", ["iteration", "layer", "q", "r", "value"], qr_table(self.nu, False)
        if any(s.weighted for s in self.specs):
            rows = []
            for r, i in enumerate(it):
                for l, s in enumerate(self.specs):
                    if self.beta[l] is None:
                        continue
                    b = self.beta[l][r]
                    for q in range(b.shape[0]):
                        for rr in range(b.shape[1]):
                            for k in range(b.shape[2]):
                                rows.append((int(i), l + 1, q + 1, rr + 1, k + 1, _fmt(b[q, rr, k])))
            yield "beta", ["iteration", "layer", "q", "r", "k", "value"], rows
            yield "sigma2", ["iteration", "layer", "q", "r", "value"], qr_table(self.sigma2, True)
        rows = [(int(i), l + 1, q + 1, _fmt(self.alpha[l][r][q]))
                for r, i in enumerate(it) for l in range(self.n_layers)
                for q in range(self.alpha[l].shape[1])]
        yield "alpha", ["iteration", "layer", "q", "value"], rows
        if self.group_lasso:
            rows = []
            for r, i in enumerate(it):
                for l in range(self.n_layers):
                    groups = self.layout.groups(l)
                    z = self.zeta2[l][r]
                    for q in range(z.shape[0]):
                        for g, U in enumerate(groups):
                            rows.append((int(i), l + 1, q + 1, subset_name(U), _fmt(z[q, g])))
            yield "zeta2", ["iteration", "layer", "q", "subset", "value"], rows
            rows = [(int(i), l + 1, _fmt(self.rho[r][l]))
                    for r, i in enumerate(it) for l in range(self.n_layers)]
            yield "rho", ["iteration", "layer", "value"], rows
        rows = [(k + 1, _fmt(v)) for k, v in enumerate(self.loglik)]
        yield "loglik", ["iteration", "value"], rows

    def _z_bytes(self):
        self.freeze()
        head = Z_MAGIC + struct.pack("<3I", self.n_nodes, self.n_times, self.n_layers)
        qs = bytes(self.n_blocks)
        body = np.ascontiguousarray(np.transpose(self.Z, (0, 1, 3, 2))).astype(np.uint8).tobytes()
        return head + qs + body

    def _serialized(self):
        """``(relative path, bytes)`` for every draw file, in a fixed order."""
        for name, header, rows in self._csv_tables():
            lines = [",".join(header)] + [",".join(map(str, row)) for row in rows]
            yield f"draws/{name}.csv", ("\n".join(lines) + "\n").encode()
        yield "z_draws.bin", self._z_bytes()

    def content_digest(self):
        h = hashlib.sha256()
        for rel, data in self._serialized():
            h.update(rel.encode())
            h.update(data)
        return h.hexdigest()

    def save(self, directory, panel: MultiLayerPanel | None = None):
        directory = Path(directory)
        try:
            (directory / "draws").mkdir(parents=True, exist_ok=True)
            self.freeze()
            digest = hashlib.sha256()
            for rel, data in self._serialized():
                digest.update(rel.encode())
                digest.update(data)
                _atomic_write(directory / rel, data)
            for stale in ("beta", "sigma2", "zeta2", "rho"):
                p = directory / "draws" / f"{stale}.csv"
                if p.exists() and not self._has_family(stale):
                    p.unlink()
            if panel is not None and not (directory / "panel.npz").exists():
                self._save_panel(directory / "panel.npz", panel)
            if self.state is not None:
                self._save_state(directory / "state.npz")
            meta = {
                "format": FORMAT,
                "config": self.config.to_dict(),
                "layout": self.layout.to_dict(),
                "specs": [s.to_dict() for s in self.specs],
                "n_nodes": self.n_nodes,
                "n_times": self.n_times,
                "panel_digest": self.panel_digest,
                "n_draws": self.n_draws,
                "iterations_done": len(self.loglik),
                "rng_state": _jsonable(self.rng_state),
                "content_digest": digest.hexdigest(),
                "warnings": list(self.warnings),
                "timing": self.timing,
            }
            _atomic_write(directory / "meta.json", json.dumps(meta, indent=2).encode())
        except OSError as exc:
            raise IoError(f"cannot write chain to {directory}: {exc}") from exc

    def _has_family(self, name):
        if name in ("beta", "sigma2"):
            return any(s.weighted for s in self.specs)
        return self.group_lasso

    def _save_panel(self, path, panel):
        arrays = {}
        for l in range(panel.n_layers):
            arrays[f"D{l}"] = panel.D[l]
            arrays[f"Y{l}"] = panel.Y[l]
            arrays[f"X{l}"] = panel.X[l]
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    def load_panel(self, directory):
        directory = Path(directory)
        try:
            with np.load(directory / "panel.npz") as f:
                L = self.n_layers
                return MultiLayerPanel(self.n_nodes, self.n_times, self.specs,
                                       [f[f"Y{l}"] for l in range(L)], [f[f"D{l}"] for l in range(L)],
                                       [f[f"X{l}"] for l in range(L)])
        except (OSError, KeyError, ValueError) as exc:
            raise CorruptCheckpoint(f"cannot read fitted panel from {directory}: {exc}") from exc

    def _save_state(self, path):
        st = self.state
        arrays = {"Z": st.Z.labels, "iteration": np.array(st.iteration)}
        for l in range(self.n_layers):
            arrays[f"kappa{l}"] = st.kappa.kappa[l]
            arrays[f"nu{l}"] = st.params.nu[l]
            arrays[f"alpha{l}"] = st.params.alpha[l]
            if st.params.beta[l] is not None:
                arrays[f"beta{l}"] = st.params.beta[l]
                arrays[f"sigma2{l}"] = st.params.sigma2[l]
            if st.shrink is not None:
                arrays[f"zeta2{l}"] = st.shrink.zeta2[l]
        if st.shrink is not None:
            arrays["rho"] = st.shrink.rho
        buf = _npz_bytes(arrays)
        _atomic_write(path, buf)

    @staticmethod
    def _load_state(path, specs, n_blocks, group_lasso):
        with np.load(path) as f:
            L = len(specs)
            params = ConnectivityParams(
                [f[f"nu{l}"] for l in range(L)],
                [f[f"beta{l}"] if f"beta{l}" in f else None for l in range(L)],
                [f[f"sigma2{l}"] if f"sigma2{l}" in f else None for l in range(L)],
                [f[f"alpha{l}"] for l in range(L)],
            )
            shrink = (ShrinkageState([f[f"zeta2{l}"] for l in range(L)], f["rho"])
                      if group_lasso else None)
            return ModelState(MembershipState(f["Z"], n_blocks), params,
                              TransitionParams([f[f"kappa{l}"] for l in range(L)]),
                              shrink, [], int(f["iteration"]))

    @classmethod
    def load(cls, directory, with_state=False):
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptCheckpoint(f"cannot read {directory / 'meta.json'}: {exc}") from exc
        if meta.get("format") != FORMAT:
            raise CorruptCheckpoint(f"{directory}: unknown chain format {meta.get('format')!r}")
        try:
            specs = [LayerSpec.from_dict(s) for s in meta["specs"]]
            config = FitConfig.from_dict(meta["config"])
            store = cls(specs, meta["n_nodes"], meta["n_times"], config,
                        DesignLayout([s.n_blocks for s in specs]), meta["panel_digest"])
            store.timing = meta.get("timing", {})
            store.warnings = meta.get("warnings", [])
            store._read_draws(directory)
            store.rng_state = meta.get("rng_state")
            if with_state and (directory / "state.npz").exists():
                store.state = cls._load_state(directory / "state.npz", specs, store.n_blocks,
                                              config.group_lasso)
        except CorruptCheckpoint:
            raise
        except (OSError, KeyError, ValueError, struct.error) as exc:
            raise CorruptCheckpoint(f"cannot read chain from {directory}: {exc}") from exc
        if store.content_digest() != meta.get("content_digest"):
            raise CorruptCheckpoint(f"{directory}: draws do not match the recorded digest")
        return store

    def _read_draws(self, directory):
        L = self.n_layers
        lay = self.layout
        draws = directory / "draws"

        def read(name):
            with open(draws / f"{name}.csv", newline="") as fh:
                rd = csv.reader(fh)
                next(rd)
                return [row for row in rd if row]

        loglik = read("loglik")
        self.loglik = np.array([float(r[1]) for r in loglik])
        alpha_rows = read("alpha")
        its = sorted({int(r[0]) for r in alpha_rows})
        R = len(its)
        pos = {it: k for k, it in enumerate(its)}
        self.iterations = np.array(its, dtype=np.int64)
        self.kappa = [np.zeros((R, q - 1, lay.p + 1)) for q in self.n_blocks]
        for r in read("kappa"):
            self.kappa[int(r[1]) - 1][pos[int(r[0])], int(r[2]) - 1, self._kappa_col(r[3], int(r[4]))] = float(r[5])
        self.nu = [np.zeros((R, q, q)) for q in self.n_blocks]
        for r in read("nu"):
            self.nu[int(r[1]) - 1][pos[int(r[0])], int(r[2]) - 1, int(r[3]) - 1] = float(r[4])
        self.alpha = [np.zeros((R, q)) for q in self.n_blocks]
        for r in alpha_rows:
            self.alpha[int(r[1]) - 1][pos[int(r[0])], int(r[2]) - 1] = float(r[3])
        self.beta = [np.zeros((R, s.n_blocks, s.n_blocks, regression_dim(s))) if s.weighted else None
                     for s in self.specs]
        self.sigma2 = [np.zeros((R, s.n_blocks, s.n_blocks)) if s.weighted else None for s in self.specs]
        if any(s.weighted for s in self.specs):
            for r in read("beta"):
                self.beta[int(r[1]) - 1][pos[int(r[0])], int(r[2]) - 1, int(r[3]) - 1, int(r[4]) - 1] = float(r[5])
            for r in read("sigma2"):
                self.sigma2[int(r[1]) - 1][pos[int(r[0])], int(r[2]) - 1, int(r[3]) - 1] = float(r[4])
        if self.group_lasso:
            self.zeta2 = [np.zeros((R, q - 1, len(lay.groups(l)))) for l, q in enumerate(self.n_blocks)]
            gidx = [{self._subset_key(U): g for g, U in enumerate(lay.groups(l))} for l in range(L)]
            for r in read("zeta2"):
                l = int(r[1]) - 1
                self.zeta2[l][pos[int(r[0])], int(r[2]) - 1, gidx[l][r[3]]] = float(r[4])
            self.rho = np.zeros((R, L))
            for r in read("rho"):
                self.rho[pos[int(r[0])], int(r[1]) - 1] = float(r[2])
        else:
            self.zeta2 = [None] * L
            self.rho = None
        self.Z = self._read_z(directory / "z_draws.bin", R)
        self._frozen = True

    @staticmethod
    def _subset_key(U):
        return "0" if not U else "-".join(str(m + 1) for m in U)

    def _kappa_col(self, subset, index):
        if subset == "0":
            return 0
        U = tuple(int(m) - 1 for m in subset.split("-"))
        return self.layout.spans[U][0] + index - 1

    def _read_z(self, path, R):
        raw = path.read_bytes()
        L = self.n_layers
        if raw[:8] != Z_MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic")
        N, T, LL = struct.unpack("<3I", raw[8:20])
        if (N, T, LL) != (self.n_nodes, self.n_times, L):
            raise CorruptCheckpoint(f"{path}: header dimensions disagree with meta.json")
        qs = tuple(raw[20:20 + L])
        if qs != self.n_blocks:
            raise CorruptCheckpoint(f"{path}: block counts disagree with meta.json")
        body = np.frombuffer(raw[20 + L:], dtype=np.uint8)
        if body.size != R * L * N * T:
            raise CorruptCheckpoint(f"{path}: expected {R} draws")
        return np.transpose(body.reshape(R, L, T, N), (0, 1, 3, 2)).copy()


def _npz_bytes(arrays):
    import io

    bio = io.BytesIO()
    np.savez(bio, **arrays)
    return bio.getvalue()


def _jsonable(state):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=lambda o: o.tolist() if hasattr(o, "tolist") else int(o)))
