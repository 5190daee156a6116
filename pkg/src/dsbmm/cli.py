"""Command line front-end: ``dsbmm simulate | fit | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command that
gets as far as knowing its output directory writes ``manifest.json`` there.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dgp import PRESETS, GeneratorConfig, GroundTruth, build_preset, simulate, true_gbc
from .errors import DSBMMError, InvalidConfig, LengthMismatch, UnknownPreset
from .gibbs import FitConfig, resume, run
from .graph import load_panel_dir, save_panel
from .metrics import evaluate
from .rand import RngStream
from .store import ChainStore

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad arguments or missing inputs (exit status 2)."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _now():
    return datetime.now(timezone.utc).isoformat()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_digest(path, exclude=(MANIFEST,)) -> str:
    """Digest over relative names and contents of every file below ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        if rel in exclude or p.name == "meta.json":
            continue
        h.update(rel.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(out, command, config, inputs, seed, started, artifacts, status):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_digest": _config_digest(config),
        "config": config,
        "input_digests": inputs,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(a) for a in artifacts),
        "exit_status": status,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))


def _err(msg):
    print(f"dsbmm: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = _now()
    if (args.preset is None) == (args.config is None):
        raise UsageError("give exactly one of --preset or --config")
    if args.n < 1 or args.t < 1:
        raise UsageError("--n and --t must be positive")
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        try:
            config = build_preset(args.preset, args.n, args.t)
        except UnknownPreset as exc:
            raise UsageError(str(exc)) from exc
        inputs = {}
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            config = GeneratorConfig.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, InvalidConfig) as exc:
            raise UsageError(f"bad generator config {path}: {exc}") from exc
        inputs = {str(path): file_digest(path)}
    out = Path(args.out)
    run_config = {"preset": args.preset, "n": args.n, "t": args.t, "generator": config.to_dict()}
    status = 1
    try:
        panel, truth = simulate(config, args.n, args.t, RngStream(args.seed, 0))
        save_panel(panel, out)
        tdict = truth.to_dict(args.preset)
        if args.preset is not None:
            tdict["causality"] = true_gbc(args.preset).tolist()
        (out / "truth.json").write_text(json.dumps(tdict))
        status = 0
    finally:
        artifacts = [p.name for p in out.iterdir() if p.name != MANIFEST] if out.exists() else []
        write_manifest(out, "simulate", run_config, inputs, args.seed, started, artifacts, status)
    print(f"wrote {args.n}x{args.t} panel with {panel.n_layers} layers to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _progress(iteration, store):
    total = store.config.iterations
    print(f"iteration {iteration}/{total} loglik {store.loglik[-1]:.3f}", file=sys.stderr, flush=True)


def _fit_one(data_dir, out_dir, fit_config):
    panel = load_panel_dir(data_dir)
    store = run(panel, fit_config, out_dir=out_dir, progress=_progress)
    return store.n_draws, store.content_digest()


def _fit_config(args, seed):
    return FitConfig(iterations=args.iters, burn_in=args.burnin, thinning=args.thin,
                     prior_mode=args.prior, seed=seed, checkpoint_every=args.checkpoint_every)


def cmd_fit(args) -> int:
    started = _now()
    out = Path(args.out)
    if args.resume:
        if not (out / "meta.json").is_file():
            raise UsageError(f"no chain to resume in {out}")
        status = 1
        try:
            meta = json.loads((out / "meta.json").read_text())
            done = int(meta["iterations_done"])
            target = args.iters if args.iters_given else int(meta["config"]["iterations"])
            store = resume(out, max(0, target - done), progress=_progress)
            status = 0
        finally:
            write_manifest(out, "fit --resume", {"target_iterations": args.iters}, {}, None,
                           started, ["meta.json", "draws", "z_draws.bin", "state.npz"], status)
        print(f"chain in {out} now has {store.n_draws} retained draws")
        return 0

    if args.data is None:
        raise UsageError("--data is required unless --resume is given")
    data = Path(args.data)
    if not (data / "spec.json").is_file():
        raise UsageError(f"data directory {data} does not exist or has no spec.json")
    if args.parallel_chains < 1:
        raise UsageError("--parallel-chains must be >= 1")
    try:
        configs = [_fit_config(args, args.seed + c) for c in range(args.parallel_chains)]
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from exc
    inputs = {f.name: file_digest(f) for f in sorted(data.iterdir()) if f.is_file()}
    run_config = {"data": str(data), **configs[0].to_dict(), "parallel_chains": args.parallel_chains}
    if args.parallel_chains == 1:
        targets = [out]
    else:
        targets = [out / f"chain_{c + 1}" for c in range(args.parallel_chains)]
    status = 1
    try:
        if len(targets) == 1:
            results = [_fit_one(data, targets[0], configs[0])]
        else:
            with ProcessPoolExecutor(max_workers=len(targets)) as pool:
                futures = [pool.submit(_fit_one, data, t, c) for t, c in zip(targets, configs)]
                results = [f.result() for f in futures]
        status = 0
    finally:
        write_manifest(out, "fit", run_config, inputs, args.seed, started,
                       [t.relative_to(out) if t != out else "." for t in targets], status)
    for t, (n_draws, digest) in zip(targets, results):
        print(f"{t}: {n_draws} retained draws, digest {digest[:12]}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_truth(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"truth file {path} does not exist")
    try:
        d = json.loads(path.read_text())
        truth = GroundTruth.from_dict(d)
    except (json.JSONDecodeError, InvalidConfig) as exc:
        raise UsageError(f"bad truth file {path}: {exc}") from exc
    causality = np.asarray(d.get("causality", truth.causality().tolist()), dtype=int)
    return truth, causality, d.get("preset")


def _flat_rows(name, rep):
    rows = []
    L = len(rep.gbc_matrix)
    for m in range(L):
        for l in range(L):
            if m != l:
                rows.append((name, "gbc", f"{m + 1}->{l + 1}", rep.gbc_matrix[m][l]))
    if rep.global_ari is not None:
        for l, v in enumerate(rep.global_ari):
            rows.append((name, "ari", l + 1, v))
        for fam, vals in rep.mse.items():
            for l, v in enumerate(vals):
                if v is not None:
                    rows.append((name, f"mse_{fam}", l + 1, v))
        for l, v in enumerate(rep.cic):
            rows.append((name, "cic", l + 1, v))
    for param, diag in rep.diagnostics.items():
        if diag is not None:
            for k, v in diag.items():
                rows.append((name, k, param, v))
    return rows


def aggregate(reports, causalities):
    """Retrieval proportion and median summaries over reports that have truth."""
    hits = [np.array_equal(np.asarray(r.gbc_matrix), c) for r, c in zip(reports, causalities)]
    agg = {"n_chains": len(reports), "retrieved": int(sum(hits)),
           "retrieval_proportion": float(np.mean(hits))}
    L = len(reports[0].gbc_matrix)
    agg["median_ari"] = [float(np.median([r.global_ari[l] for r in reports])) for l in range(L)]
    agg["median_mse"] = {}
    for fam in reports[0].mse:
        agg["median_mse"][fam] = [
            None if reports[0].mse[fam][l] is None else float(np.median([r.mse[fam][l] for r in reports]))
            for l in range(L)
        ]
    agg["median_cic"] = [float(np.median([r.cic[l] for r in reports])) for l in range(L)]
    return agg


def cmd_report(args) -> int:
    started = _now()
    chains = [Path(c) for c in args.chains]
    for c in chains:
        if not (c / "meta.json").is_file():
            raise UsageError(f"{c} is not a chain directory")
    truths = args.truth or []
    if len(truths) not in (0, 1, len(chains)):
        raise UsageError("give one --truth for all chains or one per chain")
    if len(truths) == 1:
        truths = truths * len(chains)
    loaded = [_load_truth(t) for t in truths] if truths else [None] * len(chains)
    out = Path(args.out)
    status = 1
    reports, causalities, presets = [], [], []
    try:
        result = {"chains": {}}
        rows = []
        for c, tr in zip(chains, loaded):
            store = ChainStore.load(c)
            truth = None
            if tr is not None:
                truth, causality, preset = tr
                if truth.memberships.labels.shape != (store.n_layers, store.n_nodes, store.n_times) \
                        or truth.config.n_blocks != store.n_blocks:
                    raise UsageError(f"truth does not match the shape of chain {c}")
            rep = evaluate(store, truth)
            result["chains"][str(c)] = rep.to_dict()
            rows += _flat_rows(str(c), rep)
            if truth is not None:
                reports.append(rep)
                causalities.append(causality)
                presets.append(preset)
                result["chains"][str(c)]["gbc_retrieved"] = bool(
                    np.array_equal(np.asarray(rep.gbc_matrix), causality))
        if len(reports) >= 2:
            if any(not np.array_equal(causalities[0], k) for k in causalities):
                result["aggregate"] = None
                _err("chains have different true structures; no aggregate computed")
            else:
                result["aggregate"] = aggregate(reports, causalities)
                result["aggregate"]["preset"] = presets[0]
                rows.append(("aggregate", "retrieval_proportion", "",
                             result["aggregate"]["retrieval_proportion"]))
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(result, indent=2))
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "metric", "target", "value"])
            w.writerows(rows)
        status = 0
    except UsageError:
        status = 2
        raise
    except LengthMismatch as exc:
        status = 2
        raise UsageError(str(exc)) from exc
    finally:
        inputs = {str(c): file_digest(c / "meta.json") for c in chains}
        write_manifest(out, "report", {"chains": [str(c) for c in chains], "truth": args.truth}, inputs,
                       None, started, ["report.json", "report.csv"], status)
    agg = result.get("aggregate")
    if agg:
        print(f"retrieval proportion {agg['retrieval_proportion']:.2f} over {agg['n_chains']} chains")
    print(f"wrote report for {len(chains)} chain(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="dsbmm", description="Dynamic stochastic block models for multi-layer networks")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic panel with known truth")
    s.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    s.add_argument("--config", help="generator configuration JSON")
    s.add_argument("--n", type=int, default=50, help="number of nodes")
    s.add_argument("--t", type=int, default=15, help="number of time points")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    f.add_argument("--data")
    f.add_argument("--iters", type=int, default=None)
    f.add_argument("--burnin", type=int, default=1000)
    f.add_argument("--thin", type=int, default=1)
    f.add_argument("--prior", choices=("normal", "group_lasso"), default="group_lasso")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--checkpoint-every", type=int, default=100)
    f.add_argument("--out", required=True)
    f.add_argument("--resume", action="store_true", help="continue the chain stored in --out")
    f.add_argument("--parallel-chains", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("report", help="evaluate fitted chains")
    r.add_argument("--chains", nargs="+", required=True)
    r.add_argument("--truth", action="append")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (simulate, fit, report)")
        if args.command == "fit":
            args.iters_given = args.iters is not None
            if args.iters is None:
                args.iters = 2000
        return args.func(args)
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return 2
    except (DSBMMError, OSError) as exc:
        _err(f"error: {exc}")
        return 1
    except KeyboardInterrupt:
        _err("interrupted; the last checkpoint is kept")
        return 1


if __name__ == "__main__":
    sys.exit(main())
