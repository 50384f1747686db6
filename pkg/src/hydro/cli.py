"""hydro: distill, evaluate, and analyze condensed graphs.

Exit codes: 0 success, 2 configuration or usage error, 3 ingestion error,
4 training divergence.

Heavy imports are deferred so HYDRO_THREADS can pin the BLAS pool before
numpy first loads; only the standard library is imported at module scope.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_DIVERGE = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

# DistillConfig fields an operator may set, with their coercions
_CONFIG_FIELDS = {
    "ratio": float, "epochs": int, "outer": int, "inner": int,
    "lr_feat": float, "lr_struct": float, "beta": float, "momentum": float,
    "curvature": float, "weight_decay": float, "sample_size": int,
    "layers": int, "hidden": int, "sgc_k": int, "gap_weight": float,
    "seed": int,
}


class UsageError(Exception):
    """Configuration or flag problem; mapped to exit code 2."""


def _apply_thread_cap():
    raw = os.environ.get("HYDRO_THREADS")
    if raw is None:
        return
    try:
        k = int(raw)
        if k < 1:
            raise ValueError
    except ValueError:
        print(f"error: HYDRO_THREADS must be a positive integer, got {raw!r}",
              file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    for var in _THREAD_VARS:
        os.environ[var] = str(k)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="hydro",
        description="Hyperbolic graph condensation and walk analysis.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="condense a dataset")
    d.add_argument("--dataset", help="dataset directory")
    d.add_argument("--out", help="output directory (default: out)")
    d.add_argument("--config", help="TOML config; explicit flags win")
    for name, typ in _CONFIG_FIELDS.items():
        d.add_argument("--" + name.replace("_", "-"), type=typ, default=None)

    e = sub.add_parser("eval", help="evaluate a condensed artifact")
    e.add_argument("--condensed", required=True, help="condensed.json path")
    e.add_argument("--dataset", required=True, help="dataset directory")
    e.add_argument("--task", default="nc", help="nc, lp, or nc,lp")
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--jobs", type=int, default=1,
                   help="parallel evaluation runs")
    e.add_argument("--out", help="results.json path")
    e.add_argument("--force", action="store_true",
                   help="evaluate despite a config-hash mismatch")

    a = sub.add_parser("analyze", help="walk-structure exports")
    a.add_argument("--graph", help="dataset directory")
    a.add_argument("--condensed", help="condensed.json path")
    a.add_argument("--metric", choices=["commute", "flow", "diagnostics"])
    a.add_argument("--cap", type=float, default=20000.0)
    a.add_argument("--start", type=int, default=0,
                   help="start node for the mixing curve")
    a.add_argument("--out", default="analysis", help="export directory")
    a.add_argument("--compare",
                   help="condensed.json to score against --graph")
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _toml_module():
    try:
        import tomllib
        return tomllib
    except ModuleNotFoundError:
        import tomli
        return tomli


def _load_toml(path):
    toml = _toml_module()
    try:
        with open(path, "rb") as fh:
            return toml.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except toml.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}")


def _resolve_run_config(args):
    """Merge TOML and flags (flags win) into (field map, dataset, out dir)."""
    doc = _load_toml(args.config) if args.config else {}
    allowed = set(_CONFIG_FIELDS) | {"dataset", "output"}
    for key in doc:
        if key not in allowed:
            raise UsageError(f"unknown config key {key!r}")
    fields = {}
    for name, typ in _CONFIG_FIELDS.items():
        flag_val = getattr(args, name)
        if flag_val is not None:
            fields[name] = flag_val
        elif name in doc:
            try:
                fields[name] = typ(doc[name])
            except (TypeError, ValueError):
                raise UsageError(f"config key {name!r} must be {typ.__name__}")
    dataset = args.dataset if args.dataset is not None else doc.get("dataset")
    if not dataset:
        raise UsageError("--dataset is required (flag or config)")
    out = args.out if args.out is not None else doc.get("output", "out")
    return fields, str(dataset), str(out)


def _canonical_config_text(cfg, dataset):
    """Byte-stable TOML: sorted keys, 17-digit floats. Its SHA-256 is the
    config hash embedded in every artifact. The output directory is
    deliberately excluded so artifact bytes don't depend on where they land.
    """
    from .graphcore import fmt17
    entries = {"dataset": json.dumps(dataset)}
    for name, typ in _CONFIG_FIELDS.items():
        v = getattr(cfg, name)
        entries[name] = fmt17(v) if typ is float else str(int(v))
    return "".join(f"{k} = {entries[k]}\n" for k in sorted(entries))


def _flag_for_message(msg):
    for name in sorted(_CONFIG_FIELDS, key=len, reverse=True):
        if name in msg or name.replace("_", " ") in msg:
            return "--" + name.replace("_", "-")
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_distill(args):
    from .distill import DistillConfig, TrainingDivergence, distill
    from .graphcore import fmt17, load_dataset, save_condensed

    fields, dataset, outdir = _resolve_run_config(args)
    try:
        cfg = DistillConfig(**fields).validate()
    except ValueError as exc:
        flag = _flag_for_message(str(exc))
        raise UsageError(f"{flag}: {exc}" if flag else str(exc))

    g = load_dataset(dataset)
    os.makedirs(outdir, exist_ok=True)
    text = _canonical_config_text(cfg, dataset)
    config_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
    with open(os.path.join(outdir, "config.toml"), "w") as fh:
        fh.write(text)

    log_path = os.path.join(outdir, "train.jsonl")
    try:
        res = distill(g, cfg, log_path=log_path)
    except TrainingDivergence as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.config_hash = config_hash
            exc.checkpoint.seed = cfg.seed
            ckpt_path = os.path.join(outdir, "checkpoint.json")
            save_condensed(exc.checkpoint, ckpt_path)
            print(f"last good checkpoint -> {ckpt_path}", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGE

    cg = res.condensed
    cg.config_hash = config_hash
    cg.seed = cfg.seed
    out_path = os.path.join(outdir, "condensed.json")
    save_condensed(cg, out_path)
    print(f"condensed graph (n'={cg.n}) -> {out_path}")
    print(f"training log -> {log_path}")
    print(f"best probe: epoch {res.best_epoch}, "
          f"val acc {fmt17(res.best_val_acc)}")
    return EXIT_OK


def _verify_artifact_hash(args, cg):
    """Check the artifact hash against the config.toml beside it."""
    if not cg.config_hash:
        return
    cfg_path = os.path.join(
        os.path.dirname(os.path.abspath(args.condensed)), "config.toml")
    if not os.path.exists(cfg_path):
        print(f"warning: {cfg_path} not found; skipping hash check",
              file=sys.stderr)
        return
    with open(cfg_path, "rb") as fh:
        text = fh.read()
    problems = []
    if hashlib.sha256(text).hexdigest() != cg.config_hash:
        problems.append(
            "config.toml does not hash to the artifact's config_hash")
    else:
        doc = _toml_module().loads(text.decode("utf-8"))
        recorded = os.path.normpath(str(doc.get("dataset", "")))
        if recorded != os.path.normpath(args.dataset):
            problems.append(
                f"artifact was distilled from {recorded!r}, "
                f"not {args.dataset!r}")
    if not problems:
        return
    if args.force:
        for msg in problems:
            print(f"warning: {msg} (--force)", file=sys.stderr)
        return
    raise UsageError("; ".join(problems) + " (pass --force to override)")


def cmd_eval(args):
    from .evalharness import eval_lp, eval_nc, save_results
    from .graphcore import fmt17, load_condensed, load_dataset

    tasks = [t.strip().lower() for t in args.task.split(",") if t.strip()]
    if not tasks or any(t not in ("nc", "lp") for t in tasks):
        raise UsageError(f"--task must be nc, lp, or nc,lp; got {args.task!r}")
    if len(set(tasks)) != len(tasks):
        raise UsageError("--task lists a task twice")
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")

    cg = load_condensed(args.condensed)
    g = load_dataset(args.dataset)
    _verify_artifact_hash(args, cg)

    results = []
    for t in tasks:
        fn = eval_nc if t == "nc" else eval_lp
        try:
            results.append(fn(cg, g, runs=args.runs, seed=args.seed,
                              jobs=args.jobs))
        except ValueError as exc:
            msg = str(exc)
            if "too few edges" in msg or "jobs" in msg:
                raise UsageError(msg)
            print(f"error: {msg}", file=sys.stderr)
            return EXIT_INGEST

    out = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.condensed)), "results.json")
    save_results(results, out)
    for r in results:
        print(f"{r.task.lower()}: mean={fmt17(r.mean)} std={fmt17(r.std)} "
              f"runs={r.runs}")
    print(f"results -> {out}")
    return EXIT_OK


def _analyze_target(args):
    from .graphcore import load_condensed, load_dataset
    if bool(args.graph) == bool(args.condensed):
        raise UsageError("pass exactly one of --graph or --condensed")
    return load_dataset(args.graph) if args.graph \
        else load_condensed(args.condensed)


def cmd_analyze(args):
    from . import spectral as spx
    from .graphcore import fmt17

    if args.compare:
        from .evalharness import compare_commute
        from .graphcore import load_condensed, load_dataset
        if not args.graph:
            raise UsageError("--compare needs --graph for the original")
        cg = load_condensed(args.compare)
        g = load_dataset(args.graph)
        try:
            rep = compare_commute(cg, g, cap=args.cap, out_dir=args.out)
        except ValueError as exc:
            raise UsageError(str(exc))
        print(f"commute comparison score: {fmt17(rep.score)}")
        print(f"heatmaps -> {rep.condensed_path}, {rep.original_path}")
        return EXIT_OK

    if args.metric is None:
        raise UsageError("--metric (or --compare) is required")
    obj = _analyze_target(args)
    os.makedirs(args.out, exist_ok=True)

    if args.metric == "commute":
        if args.cap <= 0:
            raise UsageError("--cap must be positive")
        path = os.path.join(args.out, "commute.csv")
        m = spx.commute_heatmap_export(obj, path, cap=args.cap)
        print(f"commute heatmap ({m.shape[0]}x{m.shape[1]}) -> {path}")
        return EXIT_OK

    if args.metric == "flow":
        try:
            d = spx.flow_distance(obj)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INGEST
        path = os.path.join(args.out, "flow.csv")
        spx.write_matrix_csv(d, path)
        print(f"flow distances ({d.shape[0]}x{d.shape[1]}) -> {path}")
        return EXIT_OK

    # diagnostics
    import numpy as np
    try:
        mixing, tv_curve, (lo, hi) = spx.walk_diagnostics(obj, start=args.start)
        gap, lam2, _ = spx.spectral_gap(
            spx.symmetric_lazy_walk(spx._adj(obj)))
        tau = spx.tau_matrix(obj)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    print(f"spectral gap: {fmt17(gap)}")
    print(f"lambda2: {fmt17(lam2)}")
    print(f"mixing time estimate: {fmt17(mixing)}")
    print(f"cheeger bounds: [{fmt17(lo)}, {fmt17(hi)}]")
    n = tau.shape[0]
    if n <= 8:
        print("pairwise tau:")
        for row in tau:
            print("  " + ",".join(fmt17(x) for x in row))
    else:
        off = tau[~np.eye(n, dtype=bool)]
        print(f"max pairwise tau: {fmt17(off.max())}")
    path = os.path.join(args.out, "tv_curve.csv")
    with open(path, "w") as fh:
        for t in range(0, 101):
            fh.write(f"{t},{fmt17(tv_curve(t))}\n")
    print(f"mixing curve -> {path}")
    return EXIT_OK


def main(argv=None):
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    from .graphcore import IngestionError
    try:
        if args.command == "distill":
            return cmd_distill(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_analyze(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST


if __name__ == "__main__":
    sys.exit(main())
