"""Data-free capacity proxy.

Each weight matrix is scored by its mean squared singular value, which equals
the squared Frobenius norm divided by the shorter side. Attention and FFN
module scores are summed separately and blended with a weight ``alpha``.

Weights are drawn from Gaussian streams keyed by ``(seed, module index)``,
so a module's matrix does not depend on evaluation order and a lookup table
of precomputed module scores reproduces direct scoring bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _expr
from .archspace import (
    NUM_LAYERS, ArchitectureSpec, ModuleShape, SearchSpaceDef, _global_configs, as_seed,
    enumerate_shapes, layer_choices, layer_shapes,
)
from .errors import NumericalError, UnsupportedSpaceError, ValidationError

DISTRIBUTIONS = ("gaussian_const_std", "gaussian_fan_in")
LOG_COMPLEXITY_NORM = "frobenius"


@dataclass(frozen=True)
class WeightInitPolicy:
    distribution: str = "gaussian_const_std"
    std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValidationError(f"unknown init distribution {self.distribution!r}")
        if not (self.std > 0 and math.isfinite(self.std)):
            raise ValidationError(f"init std must be positive, got {self.std}")

    def std_for(self, shape: ModuleShape) -> float:
        if self.distribution == "gaussian_fan_in":
            return 1.0 / math.sqrt(shape.cols)
        return self.std

    def describe(self) -> dict:
        out = {"distribution": self.distribution, "seed": self.seed}
        if self.distribution == "gaussian_const_std":
            out["std"] = self.std
        return out


def module_capacity(matrix) -> float:
    """Mean squared singular value via the Frobenius identity, in O(rows*cols)."""
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"module_capacity needs a non-empty 2-D matrix, got shape {w.shape}")
    flat = w.ravel()
    return float(np.dot(flat, flat)) / min(w.shape)


def module_capacity_svd(matrix) -> float:
    """Same quantity from explicit singular values. Kept as a test oracle."""
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"module_capacity_svd needs a non-empty 2-D matrix, got shape {w.shape}")
    try:
        sv = np.linalg.svd(w, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for a {w.shape[0]}x{w.shape[1]} matrix") from exc
    return float(np.mean(sv * sv))


def expected_module_capacity(shape: ModuleShape, policy: WeightInitPolicy) -> float:
    """Closed-form expectation ``rows*cols*std**2 / min(rows, cols)``."""
    std = policy.std_for(shape)
    return shape.rows * shape.cols * std * std / min(shape.rows, shape.cols)


def generate_weight(shape: ModuleShape, policy: WeightInitPolicy, module_index: int | None = None) -> np.ndarray:
    index = shape.index if module_index is None else module_index
    if index < 0:
        raise ValueError(f"module_index must be non-negative, got {index}")
    rng = np.random.default_rng([as_seed(policy.seed), int(index)])
    w = rng.standard_normal((shape.rows, shape.cols))
    w *= policy.std_for(shape)
    return w


@dataclass(frozen=True)
class BlockScores:
    per_layer_attn: tuple[float, ...]
    per_layer_ffn: tuple[float, ...]
    total_attn: float
    total_ffn: float

    @classmethod
    def from_layers(cls, attn: Sequence[float], ffn: Sequence[float]) -> "BlockScores":
        attn = tuple(float(x) for x in attn)
        ffn = tuple(float(x) for x in ffn)
        if len(attn) != len(ffn):
            raise ValueError("per-layer attention and FFN sequences differ in length")
        return cls(attn, ffn, sum(attn), sum(ffn))

    def to_dict(self) -> dict:
        return {
            "total_attn": self.total_attn, "total_ffn": self.total_ffn,
            "per_layer_attn": list(self.per_layer_attn), "per_layer_ffn": list(self.per_layer_ffn),
        }


def combine(blocks: BlockScores, alpha: float) -> float:
    """``alpha * S_attn + (1 - alpha) * S_ffn`` over whole-network totals."""
    return alpha * blocks.total_attn + (1.0 - alpha) * blocks.total_ffn


WeightFn = Callable[[ModuleShape, WeightInitPolicy], np.ndarray]


class ModuleScoreCache:
    """Memo of module scores keyed by (policy, module index, rows, cols).

    A module's score is a pure function of that key, so sharing one cache
    across architectures changes nothing but speed.
    """

    def __init__(self):
        self.scores: dict = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.scores)

    def get(self, shape, policy, compute):
        key = (policy, shape.index, shape.rows, shape.cols)
        value = self.scores.get(key)
        if value is None:
            self.misses += 1
            value = self.scores[key] = compute()
        else:
            self.hits += 1
        return value


def _default_weight_fn(shape, policy):
    return generate_weight(shape, policy)


def score_blocks(arch: ArchitectureSpec, space: SearchSpaceDef, policy: WeightInitPolicy | None = None, *,
                 table: "LookupTable | None" = None, weight_fn: WeightFn | None = None,
                 analytic: bool = False, cache: ModuleScoreCache | None = None) -> BlockScores:
    """Per-layer attention and FFN capacity sums for ``arch``.

    ``table`` serves module scores from a prebuilt lookup table; ``cache``
    memoizes scores computed on the fly. ``analytic`` replaces sampled
    matrices by their expected score (an extension; sampled weights are the
    default). ``weight_fn`` overrides matrix generation.
    """
    policy = policy or WeightInitPolicy()
    if table is not None and table.policy != policy:
        raise ValidationError("lookup table was built under a different init policy")
    weight_fn = weight_fn or _default_weight_fn
    attn = [0.0] * arch.num_layers
    ffn = [0.0] * arch.num_layers
    for shape in enumerate_shapes(arch, space):
        if shape.block == "other":
            continue
        if table is not None:
            value = table[shape]
        elif analytic:
            value = expected_module_capacity(shape, policy)
        elif cache is not None:
            value = cache.get(shape, policy, lambda: module_capacity(weight_fn(shape, policy)))
        else:
            value = module_capacity(weight_fn(shape, policy))
        if shape.block == "attention":
            attn[shape.layer] += value
        else:
            ffn[shape.layer] += value
    return BlockScores.from_layers(attn, ffn)


def log_complexity(arch: ArchitectureSpec, space: SearchSpaceDef, policy: WeightInitPolicy | None = None, *,
                   weight_fn: WeightFn | None = None) -> float:
    """Sum of log Frobenius norms over attention and FFN matrices."""
    policy = policy or WeightInitPolicy()
    weight_fn = weight_fn or _default_weight_fn
    total = 0.0
    for shape in enumerate_shapes(arch, space):
        if shape.block == "other":
            continue
        norm = float(np.linalg.norm(weight_fn(shape, policy)))
        if norm == 0.0 or not math.isfinite(norm):
            raise NumericalError(f"log complexity undefined: module {shape.name} in layer {shape.layer} "
                                 f"has norm {norm}")
        total += math.log(norm)
    return total


# --- lookup table ---------------------------------------------------------

def _table_key(shape: ModuleShape):
    return (shape.index, shape.rows, shape.cols)


class LookupTable:
    """Precomputed module scores keyed by (module index, rows, cols)."""

    def __init__(self, space_name: str, policy: WeightInitPolicy):
        self.space_name = space_name
        self.policy = policy
        self.scores: dict[tuple[int, int, int], float] = {}
        self.modules: dict[tuple[int, int, int], ModuleShape] = {}

    def __len__(self):
        return len(self.scores)

    def __contains__(self, shape):
        return _table_key(shape) in self.scores

    def __getitem__(self, shape: ModuleShape) -> float:
        try:
            return self.scores[_table_key(shape)]
        except KeyError:
            raise KeyError(f"module {shape.name} ({shape.rows}x{shape.cols}, index {shape.index}) "
                           f"not in lookup table for {self.space_name}") from None

    def entries_named(self, name: str) -> list[ModuleShape]:
        return [s for s in self.modules.values() if s.name == name]


def lookup_modules(space: SearchSpaceDef) -> dict[tuple[int, int, int], ModuleShape]:
    """Every distinct scored module the space can produce, without generating weights."""
    if space.kind == "heterogeneous_per_layer":
        raise UnsupportedSpaceError(
            f"space {space.name} is heterogeneous per layer; lookup tables need a homogeneous "
            f"or decoder-grid space")
    referenced = set()
    for t in space.layer_modules:
        if t.block == "other":
            continue
        for source in (t.rows, t.cols, t.repeat):
            referenced |= _expr.names_in(source)
    for c in space.constraints:
        referenced |= _expr.names_in(c)
    layer_names = {d.name for d in space.layer_dims}
    glob_names = referenced - layer_names - set(space.constants) - {"layer"}
    layer_ref = referenced & layer_names
    modules = {}
    for cfg in _global_configs(space, glob_names, keep_layers=NUM_LAYERS in glob_names):
        for i in range(cfg.get(NUM_LAYERS, space.max_layers)):
            for record in layer_choices(space, cfg, i, names=layer_ref):
                for shape in layer_shapes(space, cfg, record, i):
                    if shape.block != "other":
                        modules.setdefault(_table_key(shape), shape)
    return modules


def build_lookup_table(space: SearchSpaceDef, policy: WeightInitPolicy | None = None, *,
                       weight_fn: WeightFn | None = None) -> LookupTable:
    policy = policy or WeightInitPolicy()
    weight_fn = weight_fn or _default_weight_fn
    table = LookupTable(space.name, policy)
    for key, shape in sorted(lookup_modules(space).items()):
        table.scores[key] = module_capacity(weight_fn(shape, policy))
        table.modules[key] = shape
    return table


class Scorer:
    """Scoring context shared by search and evaluation.

    Caches block scores per architecture and counts how many weight matrices
    were generated, which lets callers confirm that table-backed scoring does
    no generation.
    """

    def __init__(self, space: SearchSpaceDef, policy: WeightInitPolicy | None = None, alpha: float = 0.5,
                 table: LookupTable | None = None, analytic: bool = False,
                 cache: ModuleScoreCache | None = None):
        self.space = space
        self.cache = cache
        self.policy = policy or WeightInitPolicy()
        self.alpha = alpha
        self.table = table
        self.analytic = analytic
        self.generations = 0
        self.seconds = 0.0
        self._cache: dict[str, BlockScores] = {}

    def _weights(self, shape, policy):
        self.generations += 1
        return generate_weight(shape, policy)

    def blocks(self, arch: ArchitectureSpec) -> BlockScores:
        cached = self._cache.get(arch.key)
        if cached is None:
            start = time.perf_counter()
            cached = score_blocks(arch, self.space, self.policy, table=self.table,
                                  weight_fn=self._weights, analytic=self.analytic, cache=self.cache)
            self.seconds += time.perf_counter() - start
            self._cache[arch.key] = cached
        return cached

    def proxy(self, arch: ArchitectureSpec) -> float:
        return combine(self.blocks(arch), self.alpha)

    def describe(self) -> dict:
        return {"policy": self.policy.describe(), "alpha": self.alpha, "lookup_table": self.table is not None,
                "analytic": self.analytic}
