"""``capnas`` command line.

Subcommands: score, eval, tune-alpha, search, gen. Machine-readable output
(JSON lines, JSON, CSV) goes to stdout or to the named files; human tables go
to stderr when ``--pretty`` is given.

Exit codes: 0 success, 1 I/O error, 2 validation or usage error, 3 numerical
degeneracy.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .alphaopt import AlphaGrid, heuristic_alpha, heuristic_terms, optimize_alpha_sampling
from .archspace import (
    as_seed, count_params, dump_space, estimate_tflops, load_architectures, resolve_space, sample_with,
    space_size, template_names, validate,
)
from .benchio import (
    PROXIES, dump_record, evaluate_proxy, heuristic_inputs_from_sample, load_benchmark, metric_names,
    normalize_metric_name, proxy_scores, sample_unique, scatter_rows, synth_benchmark, write_csv,
)
from .capacity import (
    DISTRIBUTIONS, ModuleScoreCache, Scorer, WeightInitPolicy, build_lookup_table, combine,
)
from .errors import CapnasError, NumericalError, SpaceTooLargeError, ValidationError
from .search import SearchConfig, nsga2_search

log = logging.getLogger("capnas")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_DEGENERATE = 0, 1, 2, 3
WORKERS_ENV = "CAPNAS_WORKERS"


class UsageError(ValidationError):
    pass


# --- manifest and output helpers -------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class RunManifest:
    """Effective settings of one command.

    The id hashes the command and its configuration only, so reruns with the
    same flags reference the same manifest id and produce identical outputs.
    """

    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        self.finished = None

    @property
    def id(self) -> str:
        payload = _canonical({"command": self.command, "config": self.config, "tool_version": __version__})
        return hashlib.sha1(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"manifest_id": self.id, "command": self.command, "config": self.config,
                "tool_version": __version__, "started": self.started, "finished": self.finished}

    def write(self, path) -> None:
        self.finished = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _policy(args) -> WeightInitPolicy:
    return WeightInitPolicy(distribution=args.init, std=args.init_std, seed=args.init_seed)


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1, got {value}")
    return value


def _pretty(rows, columns):
    if not rows:
        return
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)), file=sys.stderr)
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(columns, widths)), file=sys.stderr)


def _fmt(value):
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def _finish(manifest, args):
    if getattr(args, "manifest", None):
        manifest.write(args.manifest)


# --- commands ---------------------------------------------------------------

def cmd_score(args) -> int:
    space = resolve_space(args.space)
    policy = _policy(args)
    if args.archs:
        archs = [validate(a, space) for a in load_architectures(args.archs)]
    else:
        if args.sample < 0:
            raise UsageError(f"--sample must be >= 0, got {args.sample}")
        rng = np.random.default_rng(as_seed(args.seed))
        archs = [sample_with(space, rng) for _ in range(args.sample)]
    table = build_lookup_table(space, policy) if args.table else None
    scorer = Scorer(space, policy, args.alpha, table=table)
    manifest = RunManifest("score", {
        "space": space.name, "archs": args.archs, "sample": None if args.archs else args.sample,
        "seed": args.seed, "alpha": args.alpha, "init": policy.describe(), "lookup_table": args.table,
        "seq_len": args.seq_len,
    })
    rows = []
    for arch in sorted({a.id: a for a in archs}.values(), key=lambda a: a.id):
        start = time.perf_counter()
        blocks = scorer.blocks(arch)
        micros = (time.perf_counter() - start) * 1e6
        row = {"manifest_id": manifest.id, "id": arch.id, "s_attn": blocks.total_attn,
               "s_ffn": blocks.total_ffn, "s_proxy": combine(blocks, args.alpha),
               "params": count_params(arch, space), "tflops": estimate_tflops(arch, space, args.seq_len)}
        if args.timing:
            row["micros"] = round(micros, 1)
        rows.append(row)
    with _output(args.out) as fh:
        for row in rows:
            fh.write(_canonical(row) + "\n")
    if args.pretty:
        _pretty(rows, ["id", "s_attn", "s_ffn", "s_proxy", "params", "tflops"])
    if rows and args.timing:
        mean = sum(r["micros"] for r in rows) / len(rows) / 1e6
        print(f"mean scoring time {mean:.4f} s over {len(rows)} architectures", file=sys.stderr)
    _finish(manifest, args)
    return EXIT_OK


def cmd_eval(args) -> int:
    space = resolve_space(args.space)
    policy = _policy(args)
    records = sorted(load_benchmark(args.benchmark, space), key=lambda r: r.arch.id)
    args.metric = normalize_metric_name(args.metric)
    available = metric_names(records)
    if args.metric not in available:
        raise UsageError(f"metric {args.metric!r} not in {args.benchmark}; available: {', '.join(available)}")
    if args.proxy == "capacity" and args.alpha is None:
        raise UsageError("--proxy capacity needs --alpha (tune it with `capnas tune-alpha`)")
    manifest = RunManifest("eval", {
        "space": space.name, "benchmark": str(args.benchmark), "proxy": args.proxy, "metric": args.metric,
        "alpha": args.alpha, "init": policy.describe(), "n": len(records),
    })
    cache = ModuleScoreCache()
    report = evaluate_proxy(records, space, args.proxy, args.metric, policy, args.alpha,
                            workers=_workers(args), cache=cache)
    out = report.to_dict()
    out["init_policy"] = policy.describe()
    if not args.timing:
        out.pop("mean_score_time")
    out["manifest_id"] = manifest.id
    with _output(args.out) as fh:
        fh.write(_canonical(out) + "\n")
    if args.scatter:
        scores, _ = proxy_scores([r.arch for r in records], space, args.proxy, policy, args.alpha, cache=cache)
        rows = [{"manifest_id": manifest.id, **row} for row in scatter_rows(records, scores, args.metric)]
        write_csv(args.scatter, rows)
    if args.pretty:
        _pretty([out], ["proxy", "metric", "n", "kt", "spr"])
    _finish(manifest, args)
    return EXIT_OK


def cmd_tune_alpha(args) -> int:
    space = resolve_space(args.space)
    policy = _policy(args)
    grid = AlphaGrid.parse(args.grid)
    rng = np.random.default_rng([as_seed(args.seed), 0xA1FA])
    cache = ModuleScoreCache()
    config = {"space": space.name, "method": args.method, "k": args.k, "seed": args.seed,
              "init": policy.describe()}
    if args.method == "sampling":
        if not args.benchmark:
            raise UsageError("--method sampling needs --benchmark with ground-truth metrics; "
                             "--method heuristic works from the space alone")
        records = sorted(load_benchmark(args.benchmark, space), key=lambda r: r.arch.id)
        if not records:
            raise UsageError(f"{args.benchmark} has no records; --method heuristic needs no ground truth")
        args.metric = normalize_metric_name(args.metric)
        available = metric_names(records)
        if args.metric not in available:
            raise UsageError(f"metric {args.metric!r} not in {args.benchmark}; available: "
                             f"{', '.join(available)}")
        k = len(records) if args.k is None else args.k
        if not 3 <= k <= len(records):
            raise UsageError(f"--k must lie in [3, {len(records)}], got {k}")
        chosen = sorted(rng.choice(len(records), size=k, replace=False).tolist())
        subset = [records[i] for i in chosen]
        config.update({"benchmark": str(args.benchmark), "metric": args.metric, "k": k,
                       "grid": {"lo": grid.lo, "hi": grid.hi, "step": grid.step}})
        manifest = RunManifest("tune-alpha", config)
        attn, ffn, truth = [], [], []
        scorer = Scorer(space, policy, cache=cache)
        for r in subset:
            blocks = scorer.blocks(r.arch)
            attn.append(blocks.total_attn)
            ffn.append(blocks.total_ffn)
            truth.append(r.metrics[args.metric])
        result = optimize_alpha_sampling(truth, attn, ffn, grid, sample_ids=[r.arch.id for r in subset])
        out = result.to_dict()
    else:
        k = 50 if args.k is None else args.k
        config["k"] = k
        manifest = RunManifest("tune-alpha", config)
        archs = sorted(sample_unique(space, k, rng), key=lambda a: a.id)
        h = heuristic_inputs_from_sample(archs, space, policy, cache=cache)
        lam, phi, flag = heuristic_terms(h)
        out = {"alpha_star": heuristic_alpha(h), "method": "heuristic",
               "inputs": {"tau_ap": h.tau_ap, "tau_fp": h.tau_fp, "tau_af": h.tau_af},
               "lambda": lam, "phi": phi, "flag": flag, "sample_ids": [a.id for a in archs]}
    out["manifest_id"] = manifest.id
    with _output(args.out) as fh:
        fh.write(_canonical(out) + "\n")
    if args.curve and args.method == "sampling":
        write_csv(args.curve, [{"manifest_id": manifest.id, "alpha": a, "tau": t} for a, t in result.grid_curve])
    if args.pretty:
        print(f"alpha* = {out['alpha_star']:.6g} ({out['method']})", file=sys.stderr)
    _finish(manifest, args)
    return EXIT_OK


def cmd_search(args) -> int:
    space = resolve_space(args.space)
    policy = _policy(args)
    cfg = SearchConfig(population=args.pop, generations=args.gens, crossover_rate=args.crossover,
                       mutation_rate=args.mutation, param_bounds=(args.params_low, args.params_high),
                       alpha=args.alpha, seed=args.seed, seq_len=args.seq_len, workers=_workers(args))
    table = build_lookup_table(space, policy) if args.table else None
    scorer = Scorer(space, policy, args.alpha, table=table, cache=ModuleScoreCache())
    manifest = RunManifest("search", {"space": space.name, "search": cfg.to_dict(), "init": policy.describe(),
                                      "lookup_table": args.table})
    result = nsga2_search(space, scorer, cfg)
    result.front.check(cfg.param_bounds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = sorted(result.front.members, key=lambda c: c.arch.id)
    with open(out_dir / "front.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for c in members:
            fh.write(_canonical({"manifest_id": manifest.id, **c.to_dict()}) + "\n")
    write_csv(out_dir / "history.csv",
              [{"manifest_id": manifest.id, "generation": h.generation, "best": h.best_proxy,
                "median": h.median_proxy, "feasible": h.feasible, "evaluated": h.evaluated}
               for h in result.history])
    manifest.write(out_dir / "manifest.json")
    if args.manifest:
        manifest.write(args.manifest)
    rows = [{"id": c.arch.id, "proxy": c.proxy, "tflops": c.tflops, "params": c.params}
            for c in sorted(members, key=lambda c: (c.tflops, c.arch.id))]
    _pretty(rows, ["id", "proxy", "tflops", "params"])
    print(f"{len(members)} front members from {result.evaluated} evaluated architectures", file=sys.stderr)
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.list:
        for name in template_names():
            print(name)
        return EXIT_OK
    if not args.space:
        raise UsageError("gen needs --space NAME (or --list)")
    space = resolve_space(args.space)
    if args.synth_benchmark:
        policy = _policy(args)
        manifest = RunManifest("gen", {"space": space.name, "synth": {
            "n": args.n, "true_alpha": args.true_alpha, "noise": args.noise, "seed": args.seed,
            "metric": args.metric}, "init": policy.describe()})
        records = synth_benchmark(space, args.n, args.true_alpha, args.noise, args.seed, policy,
                                  metric=args.metric, cache=ModuleScoreCache())
        with _output(args.out) as fh:
            for r in sorted(records, key=lambda r: r.arch.id):
                fh.write(dump_record(r) + "\n")
        _finish(manifest, args)
        return EXIT_OK
    with _output(args.out) as fh:
        fh.write(dump_space(space))
    print(f"{space.name}: {space_size(space)} architectures", file=sys.stderr)
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_init(p):
    p.add_argument("--init", choices=DISTRIBUTIONS, default="gaussian_const_std",
                   help="weight init distribution (default: gaussian_const_std)")
    p.add_argument("--init-std", type=float, default=0.02, help="std for gaussian_const_std (default 0.02)")
    p.add_argument("--init-seed", type=int, default=0, help="seed of the weight streams (default 0)")


def _add_common(p):
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--manifest", help="write the run manifest to this path")
    p.add_argument("--pretty", action="store_true", help="print a human-readable table to stderr")
    p.add_argument("--workers", type=int, default=None, help=f"scoring threads (default ${WORKERS_ENV} or 1)")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock timings (makes output run-dependent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capnas", description="Training-free capacity proxy for transformer NAS.")
    parser.add_argument("--version", action="version", version=f"capnas {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score architectures with the capacity proxy")
    p.add_argument("space", help="template name or space file")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--archs", help="architecture file (JSON object, list, or JSON lines)")
    src.add_argument("--sample", type=int, default=10, help="number of architectures to sample (default 10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--table", action="store_true", help="score through a prebuilt lookup table")
    _add_init(p)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="correlate a proxy with benchmark ground truth")
    p.add_argument("benchmark", help="benchmark JSON lines file")
    p.add_argument("--space", required=True, help="template name or space file")
    p.add_argument("--proxy", choices=PROXIES, default="capacity")
    p.add_argument("--metric", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scatter", help="write rank-vs-rank scatter CSV here")
    _add_init(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune-alpha", help="choose alpha by grid sampling or the heuristic")
    p.add_argument("--space", required=True)
    p.add_argument("--benchmark", help="benchmark file (needed for --method sampling)")
    p.add_argument("--method", choices=("sampling", "heuristic"), default="sampling")
    p.add_argument("--metric", default="synthetic_score")
    p.add_argument("--k", type=int, help="sample size (default: whole benchmark / 50 for heuristic)")
    p.add_argument("--grid", default="-1.5:1.5:0.1", help="lo:hi:step (default -1.5:1.5:0.1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve", help="write the alpha-vs-tau curve CSV here")
    _add_init(p)
    _add_common(p)
    p.set_defaults(func=cmd_tune_alpha)

    p = sub.add_parser("search", help="NSGA-II search for (proxy, TFLOPs) trade-offs")
    p.add_argument("--space", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--pop", type=int, default=64)
    p.add_argument("--gens", type=int, default=50)
    p.add_argument("--crossover", type=float, default=0.9)
    p.add_argument("--mutation", type=float, default=0.1)
    p.add_argument("--params-low", type=int, default=0)
    p.add_argument("--params-high", type=int, default=10**15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--table", action="store_true", help="score through a prebuilt lookup table")
    p.add_argument("--out-dir", default="capnas-search", help="directory for front.jsonl, history.csv, manifest.json")
    p.add_argument("--manifest", help="extra copy of the run manifest")
    p.add_argument("--workers", type=int, default=None)
    _add_init(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gen", help="emit space templates or synthetic benchmarks")
    p.add_argument("--list", action="store_true", help="list bundled templates")
    p.add_argument("--space", help="template name or space file")
    p.add_argument("--synth-benchmark", action="store_true", help="emit a synthetic benchmark instead")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--true-alpha", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", default="synthetic_score")
    _add_init(p)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"capnas: numerical error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValidationError, SpaceTooLargeError, CapnasError, yaml.YAMLError) as exc:
        print(f"capnas: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"capnas: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
