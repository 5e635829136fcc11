"""Benchmark files, proxy evaluation against ground truth, synthetic benchmarks.

Benchmark files are JSON lines, one record per architecture::

    {"schema_version": 1, "space": "flexibert", "id": "...", "num_layers": 2,
     "global": {...}, "layers": [{...}, ...], "metrics": {"glue_score": 0.71}}

Saving writes canonical JSON (sorted keys, no spaces), so a file written by
:func:`save_benchmark` survives a load/save cycle byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .alphaopt import HeuristicInputs
from .archspace import (
    SCHEMA_VERSION, ArchitectureSpec, SearchSpaceDef, as_seed, count_params, sample_with, validate,
)
from .capacity import ModuleScoreCache, WeightInitPolicy, combine, log_complexity, score_blocks
from .errors import ValidationError
from .rankstats import KENDALL_VARIANT, kendall_tau, spearman_rho

log = logging.getLogger(__name__)

PROXIES = ("capacity", "params", "log_complexity", "attn_only", "ffn_only")
_METRIC_NAME = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass(frozen=True)
class BenchmarkRecord:
    arch: ArchitectureSpec
    metrics: Mapping[str, float]

    def __post_init__(self):
        if not self.metrics:
            raise ValidationError(f"record {self.arch.id} has no metrics")
        clean = {}
        for name, value in self.metrics.items():
            key = normalize_metric_name(name)
            try:
                clean[key] = float(value)
            except (TypeError, ValueError):
                raise ValidationError(f"record {self.arch.id}: metric {name} is not a number") from None
        object.__setattr__(self, "metrics", clean)

    def to_dict(self) -> dict:
        return {**self.arch.to_dict(), "metrics": dict(sorted(self.metrics.items()))}


def normalize_metric_name(name: str) -> str:
    key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
    if not _METRIC_NAME.match(key):
        raise ValidationError(f"invalid metric name {name!r}")
    return key


@dataclass(frozen=True)
class CorrelationReport:
    proxy_name: str
    metric_name: str
    spr: float
    kt: float
    n: int
    mean_score_time: float
    alpha: float | None
    init_policy: Mapping
    kendall_variant: str = KENDALL_VARIANT

    def to_dict(self) -> dict:
        return {
            "proxy": self.proxy_name, "metric": self.metric_name, "spr": self.spr, "kt": self.kt,
            "n": self.n, "mean_score_time": self.mean_score_time, "alpha": self.alpha,
            "init_policy": json.dumps(dict(self.init_policy), sort_keys=True),
            "kendall_variant": self.kendall_variant,
        }


# --- file IO --------------------------------------------------------------

def dump_record(record: BenchmarkRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))


def save_benchmark(path, records: Iterable[BenchmarkRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(dump_record(record) + "\n")


def parse_benchmark_lines(lines: Iterable[str], space: SearchSpaceDef, source: str = "<benchmark>"
                          ) -> list[BenchmarkRecord]:
    records, seen = [], {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{source}: malformed JSON ({exc.msg})", line=lineno) from None
        if not isinstance(data, dict):
            raise ValidationError(f"{source}: record must be a JSON object", line=lineno)
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"{source}: unsupported schema_version {version!r}", line=lineno)
        if data.get("space", space.name) != space.name:
            raise ValidationError(f"{source}: record belongs to space {data.get('space')!r}, "
                                  f"expected {space.name!r}", line=lineno)
        try:
            arch = ArchitectureSpec.from_dict(data)
            validate(arch, space)
            record = BenchmarkRecord(arch, data.get("metrics") or {})
        except ValidationError as exc:
            raise ValidationError(f"{source}: {exc}", line=lineno, dimension=exc.dimension) from None
        if arch.id in seen:
            raise ValidationError(f"{source}: duplicate id {arch.id!r} (first on line {seen[arch.id]})",
                                  line=lineno)
        seen[arch.id] = lineno
        records.append(record)
    return records


def load_benchmark(path, space: SearchSpaceDef) -> list[BenchmarkRecord]:
    start = time.perf_counter()
    with open(path, encoding="utf-8") as fh:
        records = parse_benchmark_lines(fh, space, source=str(path))
    if not records:
        warnings.warn(f"benchmark file {path} contains no records", stacklevel=2)
    log.info("loaded %d records from %s in %.3fs", len(records), path, time.perf_counter() - start)
    return records


def metric_names(records: Sequence[BenchmarkRecord]) -> list[str]:
    names = set()
    for r in records:
        names |= set(r.metrics)
    return sorted(names)


# --- proxy scoring ----------------------------------------------------------

def _score_one(arch, space, proxy, policy, alpha, cache=None):
    start = time.perf_counter()
    if proxy == "params":
        value = float(count_params(arch, space))
    elif proxy == "log_complexity":
        value = log_complexity(arch, space, policy)
    else:
        blocks = score_blocks(arch, space, policy, cache=cache)
        if proxy == "attn_only":
            value = blocks.total_attn
        elif proxy == "ffn_only":
            value = blocks.total_ffn
        else:
            value = combine(blocks, alpha)
    return value, time.perf_counter() - start


def proxy_scores(archs: Sequence[ArchitectureSpec], space: SearchSpaceDef, proxy: str,
                 policy: WeightInitPolicy | None = None, alpha: float | None = None,
                 workers: int = 1, cache: ModuleScoreCache | None = None) -> tuple[np.ndarray, float]:
    """Score every architecture; returns the scores and mean seconds per architecture.

    Timings are only comparable to uncached scoring when ``cache`` is None.
    """
    if proxy not in PROXIES:
        raise ValidationError(f"unknown proxy {proxy!r}; choose from {', '.join(PROXIES)}")
    if proxy == "capacity" and alpha is None:
        raise ValidationError("the capacity proxy needs alpha")
    policy = policy or WeightInitPolicy()

    def run(arch):
        return _score_one(arch, space, proxy, policy, alpha, cache)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, archs))
    else:
        results = [run(a) for a in archs]
    scores = np.array([r[0] for r in results], dtype=np.float64)
    mean_time = float(np.mean([r[1] for r in results])) if results else 0.0
    return scores, mean_time


def _metric_vector(records, metric_name):
    metric_name = normalize_metric_name(metric_name)
    missing = [r.arch.id for r in records if metric_name not in r.metrics]
    if missing:
        raise ValidationError(
            f"metric {metric_name!r} missing for {len(missing)} record(s); available: "
            f"{', '.join(metric_names(records))}", dimension=metric_name)
    return metric_name, np.array([r.metrics[metric_name] for r in records], dtype=np.float64)


def evaluate_proxy(records: Sequence[BenchmarkRecord], space: SearchSpaceDef, proxy: str, metric_name: str,
                   policy: WeightInitPolicy | None = None, alpha: float | None = None,
                   workers: int = 1, cache: ModuleScoreCache | None = None) -> CorrelationReport:
    """Spearman and Kendall correlation of a proxy against a benchmark metric."""
    if len(records) < 3:
        raise ValidationError(f"need at least 3 records, got {len(records)}")
    policy = policy or WeightInitPolicy()
    metric_name, truth = _metric_vector(records, metric_name)
    scores, mean_time = proxy_scores([r.arch for r in records], space, proxy, policy, alpha, workers, cache)
    return CorrelationReport(
        proxy_name=proxy, metric_name=metric_name, spr=spearman_rho(truth, scores),
        kt=kendall_tau(truth, scores), n=len(records), mean_score_time=mean_time,
        alpha=alpha if proxy == "capacity" else None, init_policy=policy.describe(),
    )


def scatter_rows(records: Sequence[BenchmarkRecord], scores, metric_name: str) -> list[dict]:
    """Ground-truth rank vs proxy rank per record (1 = largest value)."""
    from .rankstats import average_ranks

    metric_name, truth = _metric_vector(records, metric_name)
    n = len(records)
    gt_rank = n + 1 - average_ranks(truth)
    proxy_rank = n + 1 - average_ranks(np.asarray(scores))
    return [
        {"id": r.arch.id, "metric": float(t), "proxy": float(s), "metric_rank": float(gr),
         "proxy_rank": float(pr)}
        for r, t, s, gr, pr in zip(records, truth, scores, gt_rank, proxy_rank)
    ]


def write_csv(path_or_file, rows: Sequence[Mapping], fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))

    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as fh:
            emit(fh)


# --- synthetic benchmarks ---------------------------------------------------

def sample_unique(space: SearchSpaceDef, n: int, rng: np.random.Generator,
                  max_attempts: int | None = None) -> list[ArchitectureSpec]:
    archs, seen = [], set()
    attempts = 0
    max_attempts = max_attempts or 100 * max(n, 1)
    while len(archs) < n:
        if attempts >= max_attempts:
            raise ValidationError(f"space {space.name}: found only {len(archs)} distinct architectures "
                                  f"after {attempts} draws, {n} requested")
        attempts += 1
        arch = sample_with(space, rng)
        if arch.id not in seen:
            seen.add(arch.id)
            archs.append(arch)
    return archs


def synth_benchmark(space: SearchSpaceDef, n: int, true_alpha: float, noise_sigma: float, seed: int,
                    policy: WeightInitPolicy | None = None, metric: str = "synthetic_score",
                    cache: ModuleScoreCache | None = None) -> list[BenchmarkRecord]:
    """Ground truth built from the proxy's own blocks.

    The metric is ``true_alpha * S_attn + (1 - true_alpha) * S_ffn``, min-max
    scaled to [0, 1], plus Gaussian noise with standard deviation
    ``noise_sigma`` (so 0.01 means 1% of the signal range).
    """
    if n < 10:
        raise ValidationError(f"synthetic benchmarks need n >= 10, got {n}")
    if noise_sigma < 0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    policy = policy or WeightInitPolicy()
    rng = np.random.default_rng([as_seed(seed), 0x5A17])
    archs = sample_unique(space, n, rng)
    signal = np.array([combine(score_blocks(a, space, policy, cache=cache), true_alpha) for a in archs])
    span = signal.max() - signal.min()
    scaled = (signal - signal.min()) / span if span > 0 else np.zeros_like(signal)
    noise = rng.standard_normal(n) * noise_sigma if noise_sigma > 0 else np.zeros(n)
    values = scaled + noise
    return [BenchmarkRecord(a, {metric: float(v)}) for a, v in zip(archs, values)]


def heuristic_inputs_from_sample(archs: Sequence[ArchitectureSpec], space: SearchSpaceDef,
                                 policy: WeightInitPolicy | None = None,
                                 cache: ModuleScoreCache | None = None) -> HeuristicInputs:
    """Kendall taus between attention-only, FFN-only scores and parameter counts.

    Uses proxies only; no ground truth is needed.
    """
    archs = [r.arch if isinstance(r, BenchmarkRecord) else r for r in archs]
    if len(archs) < 10:
        raise ValidationError(f"heuristic sample needs k >= 10 architectures, got {len(archs)}")
    policy = policy or WeightInitPolicy()
    blocks = [score_blocks(a, space, policy, cache=cache) for a in archs]
    attn = [b.total_attn for b in blocks]
    ffn = [b.total_ffn for b in blocks]
    params = [float(count_params(a, space)) for a in archs]
    return HeuristicInputs(
        tau_ap=kendall_tau(attn, params), tau_fp=kendall_tau(ffn, params), tau_af=kendall_tau(attn, ffn),
    )
