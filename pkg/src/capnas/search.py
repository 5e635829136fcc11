"""NSGA-II over a search space: maximize the proxy, minimize TFLOPs, keep params in bounds.

Parameter bounds are hard and handled by constraint-domination: a feasible
candidate beats any infeasible one, and infeasible candidates compare by how
far they sit outside the bounds. Every evaluated candidate goes into an
archive, and the returned front is the feasible nondominated set of that
archive, so nothing good found early is lost to later selection.
"""

from __future__ import annotations

import logging
import math
import statistics
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .archspace import (
    NUM_LAYERS, ArchitectureSpec, SearchSpaceDef, as_seed, count_params, estimate_tflops, is_valid,
    iter_architectures, make_arch, resample_layer, sample_with, space_size,
)
from .capacity import Scorer
from .errors import CapnasError, SetupError, ValidationError

log = logging.getLogger(__name__)

_RUN_STREAM = 0x4E5347  # keys the selection/variation RNG apart from anything else seeded by the run
_DUPLICATE_RETRIES = 64


@dataclass(frozen=True)
class Candidate:
    arch: ArchitectureSpec
    proxy: float
    tflops: float
    params: int
    violation: int = 0
    rank: int = 0
    crowding: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.violation == 0

    def to_dict(self) -> dict:
        return {"id": self.arch.id, "proxy": self.proxy, "tflops": self.tflops, "params": self.params,
                "rank": self.rank, "arch": self.arch.to_dict()}


@dataclass(frozen=True)
class SearchConfig:
    population: int = 64
    generations: int = 50
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    param_bounds: tuple[int, int] = (0, 10**15)
    alpha: float = 0.5
    seed: int = 0
    seq_len: int = 128
    workers: int = 1

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValidationError(f"population must be an even number >= 2, got {self.population}")
        if self.generations < 1:
            raise ValidationError(f"generations must be >= 1, got {self.generations}")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {rate}")
        low, high = self.param_bounds
        if not low < high:
            raise ValidationError(f"param bounds need low < high, got ({low}, {high})")

    def to_dict(self) -> dict:
        return {"population": self.population, "generations": self.generations,
                "crossover_rate": self.crossover_rate, "mutation_rate": self.mutation_rate,
                "param_bounds": list(self.param_bounds), "alpha": self.alpha, "seed": self.seed,
                "seq_len": self.seq_len}


@dataclass(frozen=True)
class ParetoFront:
    members: tuple[Candidate, ...] = ()

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(c.arch.id for c in self.members)

    def check(self, bounds: tuple[int, int]) -> None:
        """Raise AssertionError if the front is not mutually nondominated and in bounds."""
        low, high = bounds
        for a in self.members:
            assert low < a.params < high, f"{a.arch.id} has {a.params} params outside ({low}, {high})"
            for b in self.members:
                assert not dominates(a, b), f"{a.arch.id} dominates {b.arch.id} inside the front"


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_proxy: float
    median_proxy: float
    feasible: int
    evaluated: int


@dataclass
class SearchResult:
    front: ParetoFront
    history: list[GenerationStats] = field(default_factory=list)
    evaluated: int = 0


# --- domination -------------------------------------------------------------

def violation(params: int, bounds: tuple[int, int]) -> int:
    """Distance outside the open interval ``(low, high)``; zero when feasible."""
    low, high = bounds
    if params <= low:
        return low - params + 1
    if params >= high:
        return params - high + 1
    return 0


def dominates(a: Candidate, b: Candidate) -> bool:
    """Constraint-domination with objectives (proxy up, tflops down)."""
    if a.violation or b.violation:
        return a.violation < b.violation
    return (a.proxy >= b.proxy and a.tflops <= b.tflops) and (a.proxy > b.proxy or a.tflops < b.tflops)


def _domination_matrix(pop: Sequence[Candidate]) -> np.ndarray:
    p = np.array([c.proxy for c in pop], dtype=np.float64)
    t = np.array([c.tflops for c in pop], dtype=np.float64)
    v = np.array([c.violation for c in pop], dtype=np.float64)
    no_worse = (p[:, None] >= p[None, :]) & (t[:, None] <= t[None, :])
    better = (p[:, None] > p[None, :]) | (t[:, None] < t[None, :])
    objective = no_worse & better & (v[:, None] == 0) & (v[None, :] == 0)
    either_infeasible = (v[:, None] > 0) | (v[None, :] > 0)
    return np.where(either_infeasible, v[:, None] < v[None, :], objective)


def nondominated_sort(pop: Sequence[Candidate]) -> list[list[int]]:
    """Fronts as lists of indices into ``pop``; front 0 is the nondominated set."""
    n = len(pop)
    if n == 0:
        return []
    dom = _domination_matrix(pop)
    counts = dom.sum(axis=0)
    fronts = []
    current = [int(i) for i in np.flatnonzero(counts == 0)]
    while current:
        fronts.append(current)
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = [int(i) for i in np.flatnonzero(counts == 0)]
    return fronts


def crowding_distance(front: Sequence[Candidate]) -> list[float]:
    """Per-member crowding distance; the extremes of each objective get +inf.

    Members with equal objective values are ordered by id, so the result
    does not depend on the input order.
    """
    n = len(front)
    if n == 0:
        raise ValueError("crowding_distance needs a non-empty front")
    dist = [0.0] * n
    for key in (lambda c: c.proxy, lambda c: c.tflops):
        order = sorted(range(n), key=lambda i: (key(front[i]), front[i].arch.id))
        lo, hi = key(front[order[0]]), key(front[order[-1]])
        dist[order[0]] = dist[order[-1]] = math.inf
        span = hi - lo
        if span <= 0:
            continue
        for k in range(1, n - 1):
            i = order[k]
            if dist[i] != math.inf:
                dist[i] += (key(front[order[k + 1]]) - key(front[order[k - 1]])) / span
    return dist


def pareto_filter(candidates: Sequence[Candidate]) -> ParetoFront:
    """Feasible, mutually nondominated candidates, sorted by (tflops, -proxy, id)."""
    feasible = [c for c in candidates if c.feasible]
    if not feasible:
        return ParetoFront(())
    dom = _domination_matrix(feasible)
    keep = [replace(feasible[i], rank=0) for i in np.flatnonzero(~dom.any(axis=0))]
    keep.sort(key=lambda c: (c.tflops, -c.proxy, c.arch.id))
    return ParetoFront(tuple(keep))


# --- evaluation -------------------------------------------------------------

def evaluate(arch: ArchitectureSpec, space: SearchSpaceDef, scorer: Scorer, bounds: tuple[int, int],
             seq_len: int = 128) -> Candidate:
    params = count_params(arch, space)
    return Candidate(arch=arch, proxy=float(scorer.proxy(arch)), tflops=estimate_tflops(arch, space, seq_len),
                     params=params, violation=violation(params, bounds))


def _evaluate_all(archs, space, scorer, cfg, generation):
    def run(arch):
        return evaluate(arch, space, scorer, cfg.param_bounds, cfg.seq_len)

    try:
        if cfg.workers > 1 and len(archs) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(run, archs))
        return [run(a) for a in archs]
    except CapnasError as exc:
        raise type(exc)(f"scoring failed in generation {generation}: {exc}") from exc
    except (ArithmeticError, ValueError, KeyError) as exc:
        raise CapnasError(f"scoring failed in generation {generation}: {exc}") from exc


# --- variation --------------------------------------------------------------

def _repair(space, rng, gcfg, layers, fallback):
    """Make a child valid: resample layers that break constraints; fall back when globals do."""
    layers = [dict(layer) for layer in layers]
    candidate = make_arch(space, gcfg, layers)
    if is_valid(candidate, space):
        return candidate
    for i in range(len(layers)):
        layers[i] = resample_layer(space, rng, gcfg, i)
        candidate = make_arch(space, gcfg, layers)
        if is_valid(candidate, space):
            return candidate
    return fallback


def crossover(space: SearchSpaceDef, rng: np.random.Generator, a: ArchitectureSpec,
              b: ArchitectureSpec) -> ArchitectureSpec:
    """Per-dimension uniform crossover; layer values are swapped position by position."""
    gcfg = {d.name: (a if rng.random() < 0.5 else b).global_config[d.name] for d in space.global_dims}
    n = gcfg[NUM_LAYERS]
    layers = []
    for i in range(n):
        sources = [p for p in (a, b) if i < p.num_layers]
        record = {}
        for d in space.layer_dims:
            src = sources[int(rng.integers(len(sources)))] if len(sources) > 1 else sources[0]
            record[d.name] = src.layers[i][d.name]
        layers.append(record)
    return _repair(space, rng, gcfg, layers, a)


def mutate(space: SearchSpaceDef, rng: np.random.Generator, arch: ArchitectureSpec, rate: float,
           force: bool = False) -> ArchitectureSpec:
    """Resample each dimension value with probability ``rate``.

    ``force`` guarantees at least one resampled dimension (used to escape duplicates).
    """
    gcfg = dict(arch.global_config)
    layers = [dict(layer) for layer in arch.layers]
    slots = [(None, d) for d in space.global_dims if len(d.values) > 1]
    slots += [(i, d) for i in range(arch.num_layers) for d in space.layer_dims if len(d.choices(i)) > 1]
    if not slots:
        return arch
    hit = [k for k in range(len(slots)) if rng.random() < rate]
    if force and not hit:
        hit = [int(rng.integers(len(slots)))]
    for k in hit:
        layer, d = slots[k]
        if layer is None:
            gcfg[d.name] = d.values[int(rng.integers(len(d.values)))]
        elif layer < len(layers):
            opts = d.choices(layer)
            layers[layer][d.name] = opts[int(rng.integers(len(opts)))]
    n = gcfg[NUM_LAYERS]
    if n > len(layers):
        layers += [resample_layer(space, rng, gcfg, i) for i in range(len(layers), n)]
    del layers[n:]
    return _repair(space, rng, gcfg, layers, arch)


def _tournament(rng, ranks, crowd):
    i, j = (int(x) for x in rng.integers(len(ranks), size=2))
    if (ranks[j], -crowd[j]) < (ranks[i], -crowd[i]):
        return j
    return i


def _select(pool: list[Candidate], size: int) -> list[Candidate]:
    """Environmental selection: fill by fronts, cut the last front by crowding."""
    chosen = []
    for rank, idx in enumerate(nondominated_sort(pool)):
        front = [pool[i] for i in idx]
        dist = crowding_distance(front)
        ranked = [replace(c, rank=rank, crowding=d) for c, d in zip(front, dist)]
        if len(chosen) + len(ranked) > size:
            ranked.sort(key=lambda c: (-c.crowding, c.arch.id))
            chosen.extend(ranked[:size - len(chosen)])
            break
        chosen.extend(ranked)
    return chosen


def _stats(generation, pop, evaluated):
    feasible = [c.proxy for c in pop if c.feasible]
    values = feasible or [c.proxy for c in pop]
    return GenerationStats(generation, max(values), float(statistics.median(values)), len(feasible), evaluated)


# --- drivers ----------------------------------------------------------------

def nsga2_search(space: SearchSpaceDef, scorer: Scorer, cfg: SearchConfig) -> SearchResult:
    """Run NSGA-II and return the feasible Pareto set of everything evaluated.

    Children that duplicate an archived architecture are re-mutated (then
    resampled) up to a fixed number of times, unless the archive already
    covers the whole space.
    """
    rng = np.random.default_rng([as_seed(cfg.seed), _RUN_STREAM])
    size = space_size(space)
    archive: dict[str, Candidate] = {}
    seen: set[str] = set()

    def fresh(arch, make_new):
        for _ in range(_DUPLICATE_RETRIES):
            if arch.id not in seen or len(seen) >= size:
                break
            arch = make_new(arch)
        seen.add(arch.id)
        return arch

    # initial population; bounds must be reachable within 10x population draws
    initial, feasible_seen = [], False
    for _ in range(10 * cfg.population):
        if len(initial) < cfg.population:
            arch = fresh(sample_with(space, rng), lambda _a: sample_with(space, rng))
            initial.append(arch)
        else:
            # population is full but holds nothing feasible: swap the last slot for a new draw
            arch = sample_with(space, rng)
            if arch.id in seen or violation(count_params(arch, space), cfg.param_bounds):
                continue
            seen.discard(initial[-1].id)
            seen.add(arch.id)
            initial[-1] = arch
        feasible_seen = feasible_seen or violation(count_params(arch, space), cfg.param_bounds) == 0
        if len(initial) >= cfg.population and feasible_seen:
            break
    if not feasible_seen:
        raise SetupError(f"no sampled architecture satisfies {cfg.param_bounds[0]} < params < "
                         f"{cfg.param_bounds[1]} in {10 * cfg.population} draws")
    pop = _evaluate_all(initial, space, scorer, cfg, 0)
    for c in pop:
        archive[c.arch.id] = c
    pop = _select(_unique(pop), cfg.population)
    history = [_stats(0, pop, len(archive))]

    for gen in range(1, cfg.generations + 1):
        ranks = [c.rank for c in pop]
        crowd = [c.crowding for c in pop]
        children = []
        while len(children) < cfg.population:
            a = pop[_tournament(rng, ranks, crowd)].arch
            b = pop[_tournament(rng, ranks, crowd)].arch
            pair = (crossover(space, rng, a, b), crossover(space, rng, b, a)) \
                if rng.random() < cfg.crossover_rate else (a, b)
            for child in pair:
                child = mutate(space, rng, child, cfg.mutation_rate)
                child = fresh(child, lambda x: mutate(space, rng, x, cfg.mutation_rate, force=True)
                              if rng.random() < 0.5 else sample_with(space, rng))
                children.append(child)
        new = [c for c in children if c.id not in archive]
        evaluated = _evaluate_all(_unique_archs(new), space, scorer, cfg, gen)
        for c in evaluated:
            archive[c.arch.id] = c
        pool = _unique(pop + [archive[a.id] for a in children])
        pop = _select(pool, cfg.population)
        history.append(_stats(gen, pop, len(archive)))
        log.debug("generation %d: best %.6g, %d evaluated", gen, history[-1].best_proxy, len(archive))

    front = pareto_filter(list(archive.values()))
    return SearchResult(front=front, history=history, evaluated=len(archive))


def _unique(cands):
    out, ids = [], set()
    for c in cands:
        if c.arch.id not in ids:
            ids.add(c.arch.id)
            out.append(c)
    return out


def _unique_archs(archs):
    out, ids = [], set()
    for a in archs:
        if a.id not in ids:
            ids.add(a.id)
            out.append(a)
    return out


def exhaustive_pareto(space: SearchSpaceDef, scorer: Scorer, bounds: tuple[int, int], cap: int = 10**5,
                      seq_len: int = 128) -> ParetoFront:
    """Brute-force Pareto set; refuses spaces larger than ``cap``."""
    candidates = [evaluate(a, space, scorer, bounds, seq_len) for a in iter_architectures(space, cap)]
    front = pareto_filter(candidates)
    if not front.members:
        warnings.warn(f"no architecture in {space.name} satisfies {bounds[0]} < params < {bounds[1]}",
                      RuntimeWarning, stacklevel=2)
    return front
