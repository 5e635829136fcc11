"""Architecture candidates, search spaces and the shape grammar.

A :class:`SearchSpaceDef` is declarative: it lists the hyperparameter
dimensions, which of them vary per layer, and a set of module templates whose
``rows``/``cols`` are small expressions over the dimension values. Expanding
the templates for an :class:`ArchitectureSpec` yields the weight-matrix
shapes that the capacity proxy scores, and from those the parameter count
and a dense-matmul TFLOPs estimate.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
import yaml

from . import _expr
from .errors import SpaceTooLargeError, ValidationError

SCHEMA_VERSION = 1
BLOCKS = ("attention", "ffn", "other")
KINDS = ("heterogeneous_per_layer", "homogeneous", "decoder_grid")
NUM_LAYERS = "num_layers"

# Weight streams are keyed by module index: layer * LAYER_STRIDE + position.
LAYER_STRIDE = 1 << 16
GLOBAL_INDEX_BASE = 1 << 40
_SEED_MASK = (1 << 64) - 1
_MAX_REJECTIONS = 10_000


def as_seed(seed: int) -> int:
    """Fold any integer seed into the unsigned 64-bit range."""
    return int(seed) & _SEED_MASK


@dataclass(frozen=True)
class ModuleShape:
    """One weight matrix: ``rows`` is the output dim, ``cols`` the input dim."""

    name: str
    rows: int
    cols: int
    block: str
    layer: int | None = None
    index: int = 0

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ValidationError(f"module {self.name}: unknown block {self.block!r}")
        for label, value in (("rows", self.rows), ("cols", self.cols)):
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(
                    f"module {self.name}: {label} must be a positive integer, got {value!r}",
                    dimension=self.name,
                )

    @property
    def size(self) -> int:
        return int(self.rows) * int(self.cols)


@dataclass(frozen=True)
class Dimension:
    name: str
    values: tuple
    layer_scoped: bool = False
    # Optional layer-specific allowed values (one tuple per layer index).
    per_layer: tuple[tuple, ...] | None = None

    def __post_init__(self):
        lists = [self.values] if self.per_layer is None else list(self.per_layer)
        if self.per_layer is not None and not self.layer_scoped:
            raise ValidationError(f"dimension {self.name}: per_layer values require layer_scoped", dimension=self.name)
        for vals in lists:
            if len(vals) == 0:
                raise ValidationError(f"dimension {self.name} has no allowed values", dimension=self.name)
            if len(set(vals)) != len(vals):
                raise ValidationError(f"dimension {self.name} has duplicate values", dimension=self.name)

    def choices(self, layer: int | None = None) -> tuple:
        if self.per_layer is None:
            return self.values
        if layer is None or layer >= len(self.per_layer):
            raise ValidationError(
                f"dimension {self.name} has no allowed values for layer {layer}", dimension=self.name
            )
        return self.per_layer[layer]


@dataclass(frozen=True)
class ModuleTemplate:
    name: str
    block: str
    rows: str
    cols: str
    repeat: str = "1"


@dataclass(frozen=True)
class SearchSpaceDef:
    name: str
    kind: str
    dimensions: tuple[Dimension, ...]
    layer_modules: tuple[ModuleTemplate, ...]
    global_modules: tuple[ModuleTemplate, ...] = ()
    constants: Mapping[str, Any] = field(default_factory=dict)
    constraints: tuple[str, ...] = ()
    attention_width: str | None = None
    bias: bool = False
    description: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"space {self.name}: unknown kind {self.kind!r}")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValidationError(f"space {self.name}: duplicate dimension names")
        if NUM_LAYERS not in names:
            raise ValidationError(f"space {self.name}: missing {NUM_LAYERS} dimension", dimension=NUM_LAYERS)
        nl = self.dimension(NUM_LAYERS)
        if nl.layer_scoped or any(not isinstance(v, int) or v < 0 for v in nl.values):
            raise ValidationError(f"space {self.name}: {NUM_LAYERS} must be global non-negative ints",
                                  dimension=NUM_LAYERS)
        for d in self.dimensions:
            if d.per_layer is not None and len(d.per_layer) < max(nl.values):
                raise ValidationError(
                    f"dimension {d.name} lists values for {len(d.per_layer)} layers, "
                    f"but up to {max(nl.values)} layers are allowed", dimension=d.name)
        clash = set(names) & set(self.constants)
        if clash:
            raise ValidationError(f"space {self.name}: constants shadow dimensions {sorted(clash)}")
        for t in self.layer_modules + self.global_modules:
            if t.block not in BLOCKS:
                raise ValidationError(f"module template {t.name}: unknown block {t.block!r}")
        object.__setattr__(self, "constants", MappingProxyType(dict(self.constants)))

    def dimension(self, name: str) -> Dimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def global_dims(self) -> tuple[Dimension, ...]:
        return tuple(d for d in self.dimensions if not d.layer_scoped)

    @property
    def layer_dims(self) -> tuple[Dimension, ...]:
        return tuple(d for d in self.dimensions if d.layer_scoped)

    @property
    def max_layers(self) -> int:
        return max(self.dimension(NUM_LAYERS).values)

    def _constraint_split(self):
        layer_names = {d.name for d in self.layer_dims}
        glob, per_layer = [], []
        for c in self.constraints:
            (per_layer if _expr.names_in(c) & (layer_names | {"layer"}) else glob).append(c)
        return tuple(glob), tuple(per_layer)


def _freeze(mapping: Mapping[str, Any]) -> Mapping[str, Any]:
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True, eq=False)
class ArchitectureSpec:
    """A concrete candidate.

    ``global_config`` holds every globally scoped dimension (including
    ``num_layers`` and embedding settings); ``layers`` holds one record of
    layer-scoped dimension values per layer.
    """

    id: str
    num_layers: int
    layers: tuple[Mapping[str, Any], ...]
    global_config: Mapping[str, Any]
    space: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(_freeze(layer) for layer in self.layers))
        object.__setattr__(self, "global_config", _freeze(self.global_config))
        if len(self.layers) != self.num_layers:
            raise ValidationError(
                f"architecture {self.id}: {len(self.layers)} layer records for num_layers={self.num_layers}",
                dimension=NUM_LAYERS)

    def content(self) -> dict:
        return {
            "space": self.space,
            "num_layers": self.num_layers,
            "global": dict(sorted(self.global_config.items())),
            "layers": [dict(sorted(layer.items())) for layer in self.layers],
        }

    @property
    def key(self) -> str:
        return json.dumps(self.content(), sort_keys=True, separators=(",", ":"))

    def __eq__(self, other):
        if not isinstance(other, ArchitectureSpec):
            return NotImplemented
        return self.id == other.id and self.key == other.key

    def __hash__(self):
        return hash((self.id, self.key))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "id": self.id, **self.content()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArchitectureSpec":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported architecture schema_version {version!r}")
        try:
            global_config = dict(data["global"])
            layers = [dict(layer) for layer in data["layers"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"architecture record missing field {exc}") from None
        num_layers = data.get("num_layers", global_config.get(NUM_LAYERS, len(layers)))
        global_config.setdefault(NUM_LAYERS, num_layers)
        space = data.get("space", "")
        arch_id = data.get("id") or content_id(space, global_config, layers)
        return cls(id=str(arch_id), num_layers=int(num_layers), layers=tuple(layers),
                   global_config=global_config, space=space)


def content_id(space_name: str, global_config: Mapping, layers: Sequence[Mapping]) -> str:
    payload = json.dumps(
        {"g": dict(sorted(global_config.items())), "l": [dict(sorted(x.items())) for x in layers]},
        sort_keys=True, separators=(",", ":"),
    )
    digest = hashlib.sha1(payload.encode()).hexdigest()[:16]
    return f"{space_name}-{digest}" if space_name else digest


def make_arch(space: SearchSpaceDef, global_config: Mapping, layers: Sequence[Mapping]) -> ArchitectureSpec:
    """Build an architecture with a content-derived id (equal configs, equal ids)."""
    global_config = dict(global_config)
    num_layers = int(global_config[NUM_LAYERS])
    layers = [dict(layer) for layer in layers]
    return ArchitectureSpec(
        id=content_id(space.name, global_config, layers),
        num_layers=num_layers, layers=tuple(layers), global_config=global_config, space=space.name,
    )


# --- validation -----------------------------------------------------------

def _layer_env(space: SearchSpaceDef, arch: ArchitectureSpec, layer: int) -> dict:
    return {**space.constants, **arch.global_config, **arch.layers[layer], "layer": layer}


def _global_env(space: SearchSpaceDef, global_config: Mapping) -> dict:
    return {**space.constants, **global_config}


def validate(arch: ArchitectureSpec, space: SearchSpaceDef) -> ArchitectureSpec:
    """Check every dimension value against ``space``; returns ``arch`` unchanged."""
    gdims = space.global_dims
    expected = {d.name for d in gdims}
    extra = set(arch.global_config) - expected
    if extra:
        raise ValidationError(f"architecture {arch.id}: unknown global dimension(s) {sorted(extra)}",
                              dimension=sorted(extra)[0])
    for d in gdims:
        if d.name not in arch.global_config:
            raise ValidationError(f"architecture {arch.id}: missing dimension {d.name}", dimension=d.name)
        value = arch.global_config[d.name]
        if value not in d.values:
            raise ValidationError(
                f"architecture {arch.id}: {d.name}={value!r} not in allowed values {list(d.values)}",
                dimension=d.name)
    if arch.global_config[NUM_LAYERS] != arch.num_layers:
        raise ValidationError(f"architecture {arch.id}: num_layers disagrees with global config",
                              dimension=NUM_LAYERS)
    glob_c, layer_c = space._constraint_split()
    genv = _global_env(space, arch.global_config)
    for c in glob_c:
        if not _expr.evaluate(c, genv):
            raise ValidationError(f"architecture {arch.id}: constraint violated: {c}",
                                  dimension=sorted(_expr.names_in(c))[0])
    ldims = space.layer_dims
    lnames = {d.name for d in ldims}
    for i, layer in enumerate(arch.layers):
        extra = set(layer) - lnames
        if extra:
            raise ValidationError(f"architecture {arch.id}: layer {i} has unknown dimension(s) {sorted(extra)}",
                                  dimension=sorted(extra)[0])
        for d in ldims:
            if d.name not in layer:
                raise ValidationError(f"architecture {arch.id}: layer {i} missing {d.name}", dimension=d.name)
            allowed = d.choices(i)
            if layer[d.name] not in allowed:
                raise ValidationError(
                    f"architecture {arch.id}: layer {i} {d.name}={layer[d.name]!r} "
                    f"not in allowed values {list(allowed)}", dimension=d.name)
        env = _layer_env(space, arch, i)
        for c in layer_c:
            if not _expr.evaluate(c, env):
                raise ValidationError(f"architecture {arch.id}: layer {i} violates constraint: {c}",
                                      dimension=sorted(_expr.names_in(c) & (lnames | set(expected)))[0])
    return arch


def is_valid(arch: ArchitectureSpec, space: SearchSpaceDef) -> bool:
    try:
        validate(arch, space)
    except ValidationError:
        return False
    return True


# --- shape grammar --------------------------------------------------------

def _expand(templates, env, layer, index_base):
    shapes = []
    for t in templates:
        count = int(_expr.evaluate(t.repeat, env))
        for r in range(count):
            name = t.name if t.repeat == "1" else f"{t.name}{r + 1}"
            rows = _expr.evaluate(t.rows, env)
            cols = _expr.evaluate(t.cols, env)
            shapes.append(ModuleShape(name=name, rows=int(rows), cols=int(cols), block=t.block,
                                      layer=layer, index=index_base + len(shapes)))
    return shapes


def layer_shapes(space: SearchSpaceDef, global_config: Mapping, layer_config: Mapping,
                 layer: int) -> list[ModuleShape]:
    env = {**space.constants, **global_config, **layer_config, "layer": layer}
    return _expand(space.layer_modules, env, layer, layer * LAYER_STRIDE)


def enumerate_shapes(arch: ArchitectureSpec, space: SearchSpaceDef, *, check: bool = True) -> list[ModuleShape]:
    """Expand the grammar: layer-major, template order within a layer, then global modules."""
    if check:
        validate(arch, space)
    shapes = []
    for i in range(arch.num_layers):
        shapes.extend(layer_shapes(space, arch.global_config, arch.layers[i], i))
    genv = _global_env(space, arch.global_config)
    shapes.extend(_expand(space.global_modules, genv, None, GLOBAL_INDEX_BASE))
    return shapes


def count_params(arch: ArchitectureSpec, space: SearchSpaceDef, include_other: bool = False) -> int:
    total = 0
    for s in enumerate_shapes(arch, space):
        if s.block == "other":
            if include_other:
                total += s.size
            continue
        total += s.size
        if space.bias:
            total += s.rows
    return total


def estimate_tflops(arch: ArchitectureSpec, space: SearchSpaceDef, seq_len: int = 128) -> float:
    """Dense-matmul forward-pass estimate in TFLOPs.

    ``2 * matmul_params * seq_len`` plus ``2 * seq_len**2 * width`` per layer
    for the attention scores. An ordering heuristic, not a hardware figure.
    """
    if seq_len < 1:
        raise ValidationError(f"seq_len must be >= 1, got {seq_len}")
    matmul = count_params(arch, space, include_other=False)
    flops = 2 * matmul * seq_len
    if space.attention_width is not None:
        for i in range(arch.num_layers):
            width = _expr.evaluate(space.attention_width, _layer_env(space, arch, i))
            flops += 2 * seq_len * seq_len * width
    return flops / 1e12


# --- sampling and enumeration --------------------------------------------

def _sample_layer(space, rng, global_config, layer, layer_constraints):
    env_base = {**space.constants, **global_config, "layer": layer}
    for _ in range(_MAX_REJECTIONS):
        record = {}
        for d in space.layer_dims:
            opts = d.choices(layer)
            record[d.name] = opts[int(rng.integers(len(opts)))]
        env = {**env_base, **record}
        if all(_expr.evaluate(c, env) for c in layer_constraints):
            return record
    raise ValidationError(f"space {space.name}: no layer configuration satisfies the constraints at layer {layer}")


def _sample_globals(space, rng, global_constraints):
    for _ in range(_MAX_REJECTIONS):
        cfg = {}
        for d in space.global_dims:
            cfg[d.name] = d.values[int(rng.integers(len(d.values)))]
        env = _global_env(space, cfg)
        if all(_expr.evaluate(c, env) for c in global_constraints):
            return cfg
    raise ValidationError(f"space {space.name}: no global configuration satisfies the constraints")


def sample_architecture(space: SearchSpaceDef, seed: int) -> ArchitectureSpec:
    """Uniform independent choice per dimension (per layer when layer-scoped).

    Constraints are enforced by rejection, so sampling is uniform over the
    valid values of each record.
    """
    rng = np.random.default_rng(as_seed(seed))
    return sample_with(space, rng)


def sample_with(space: SearchSpaceDef, rng: np.random.Generator) -> ArchitectureSpec:
    glob_c, layer_c = space._constraint_split()
    cfg = _sample_globals(space, rng, glob_c)
    layers = [_sample_layer(space, rng, cfg, i, layer_c) for i in range(cfg[NUM_LAYERS])]
    return make_arch(space, cfg, layers)


def resample_layer(space: SearchSpaceDef, rng: np.random.Generator, global_config: Mapping,
                   layer: int) -> dict:
    return _sample_layer(space, rng, global_config, layer, space._constraint_split()[1])


def _global_configs(space, names=None, keep_layers=True):
    """Valid global configs, restricted to ``names`` (plus num_layers) when given."""
    dims = [d for d in space.global_dims
            if names is None or d.name in names or (keep_layers and d.name == NUM_LAYERS)]
    glob_c, _ = space._constraint_split()
    keep = set(d.name for d in dims)
    checks = [c for c in glob_c if _expr.names_in(c) <= keep | set(space.constants)]
    for combo in itertools.product(*(d.values for d in dims)):
        cfg = dict(zip((d.name for d in dims), combo))
        env = _global_env(space, cfg)
        if all(_expr.evaluate(c, env) for c in checks):
            yield cfg


def layer_choices(space: SearchSpaceDef, global_config: Mapping, layer: int,
                  names=None) -> list[dict]:
    """All valid layer records at ``layer`` given the global values."""
    dims = [d for d in space.layer_dims if names is None or d.name in names]
    _, layer_c = space._constraint_split()
    keep = {d.name for d in dims} | set(global_config) | set(space.constants) | {"layer"}
    checks = [c for c in layer_c if _expr.names_in(c) <= keep]
    out = []
    base = {**space.constants, **global_config, "layer": layer}
    for combo in itertools.product(*(d.choices(layer) for d in dims)):
        record = dict(zip((d.name for d in dims), combo))
        if all(_expr.evaluate(c, {**base, **record}) for c in checks):
            out.append(record)
    return out


def space_size(space: SearchSpaceDef) -> int:
    """Number of distinct architectures, counted without enumerating them.

    Python integers are unbounded, so the count never wraps around.
    """
    _, layer_c = space._constraint_split()
    layer_names = {d.name for d in space.layer_dims}
    referenced = set()
    for c in layer_c:
        referenced |= _expr.names_in(c)
    glob_ref = referenced - layer_names - {"layer"} - set(space.constants)
    per_layer_specific = any(d.per_layer is not None for d in space.layer_dims)
    cache = {}

    def per_layer_count(cfg, layer):
        key = (layer if (per_layer_specific or "layer" in referenced) else None,
               tuple(sorted((k, cfg[k]) for k in glob_ref)))
        if key not in cache:
            if not layer_c:
                cache[key] = math.prod(len(d.choices(layer)) for d in space.layer_dims)
            else:
                cache[key] = len(layer_choices(space, cfg, layer))
        return cache[key]

    total = 0
    for cfg in _global_configs(space):
        n = 1
        for i in range(cfg[NUM_LAYERS]):
            n *= per_layer_count(cfg, i)
            if n == 0:
                break
        total += n
    return total


def iter_architectures(space: SearchSpaceDef, cap: int = 10**5) -> Iterator[ArchitectureSpec]:
    size = space_size(space)
    if size > cap:
        raise SpaceTooLargeError(size, cap)
    for cfg in _global_configs(space):
        per_layer = [layer_choices(space, cfg, i) for i in range(cfg[NUM_LAYERS])]
        for layers in itertools.product(*per_layer):
            yield make_arch(space, cfg, layers)


# --- files ----------------------------------------------------------------

def space_from_dict(data: Mapping[str, Any]) -> SearchSpaceDef:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported space schema_version {version!r}")
    try:
        dims = []
        for d in data["dimensions"]:
            per_layer = d.get("per_layer")
            values = d.get("values")
            if values is None and per_layer is not None:
                values = sorted({v for vals in per_layer for v in vals}, key=str)
            dims.append(Dimension(
                name=d["name"], values=tuple(values), layer_scoped=bool(d.get("layer_scoped", False)),
                per_layer=None if per_layer is None else tuple(tuple(v) for v in per_layer),
            ))

        def templates(key):
            return tuple(
                ModuleTemplate(name=t["name"], block=t["block"], rows=str(t["rows"]), cols=str(t["cols"]),
                               repeat=str(t.get("repeat", "1")))
                for t in data.get(key, ())
            )

        return SearchSpaceDef(
            name=data["name"], kind=data["kind"], dimensions=tuple(dims),
            layer_modules=templates("layer_modules"), global_modules=templates("global_modules"),
            constants=dict(data.get("constants") or {}),
            constraints=tuple(str(c) for c in data.get("constraints", ())),
            attention_width=None if data.get("attention_width") is None else str(data["attention_width"]),
            bias=bool(data.get("bias", False)), description=data.get("description", ""),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"space definition missing or malformed field: {exc}") from None


def space_to_dict(space: SearchSpaceDef) -> dict:
    def dim(d):
        out = {"name": d.name}
        if d.per_layer is not None:
            out["per_layer"] = [list(v) for v in d.per_layer]
        else:
            out["values"] = list(d.values)
        if d.layer_scoped:
            out["layer_scoped"] = True
        return out

    def tmpl(t):
        out = {"name": t.name, "block": t.block, "rows": t.rows, "cols": t.cols}
        if t.repeat != "1":
            out["repeat"] = t.repeat
        return out

    data = {
        "schema_version": SCHEMA_VERSION, "name": space.name, "kind": space.kind,
        "description": space.description, "constants": dict(space.constants),
        "dimensions": [dim(d) for d in space.dimensions],
        "constraints": list(space.constraints),
        "layer_modules": [tmpl(t) for t in space.layer_modules],
        "global_modules": [tmpl(t) for t in space.global_modules],
        "attention_width": space.attention_width, "bias": space.bias,
    }
    return data


def dump_space(space: SearchSpaceDef) -> str:
    return yaml.safe_dump(space_to_dict(space), sort_keys=False, default_flow_style=None, width=100)


def load_space(path) -> SearchSpaceDef:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not a valid space file: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: space file must contain a mapping")
    return space_from_dict(data)


def template_names() -> list[str]:
    files = resources.files("capnas").joinpath("spaces").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def load_template(name: str) -> SearchSpaceDef:
    if name not in template_names():
        raise ValidationError(f"unknown space template {name!r}; available: {', '.join(template_names())}")
    text = resources.files("capnas").joinpath("spaces", f"{name}.yaml").read_text(encoding="utf-8")
    return space_from_dict(yaml.safe_load(text))


def resolve_space(ref) -> SearchSpaceDef:
    """Accept either a template name or a path to a space file."""
    if isinstance(ref, SearchSpaceDef):
        return ref
    ref = str(ref)
    if ref in template_names():
        return load_template(ref)
    looks_like_path = any(sep in ref for sep in ("/", "\\")) or ref.endswith((".yaml", ".yml", ".json"))
    if not looks_like_path and not Path(ref).exists():
        return load_template(ref)  # raises, listing the templates
    return load_space(ref)


def load_architectures(path) -> list[ArchitectureSpec]:
    """Read one JSON architecture object, a JSON list, or JSON lines."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if not stripped:
        return []
    try:
        data = json.loads(stripped)
        items = data if isinstance(data, list) else [data]
        return [ArchitectureSpec.from_dict(item) for item in items]
    except json.JSONDecodeError:
        pass
    archs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            archs.append(ArchitectureSpec.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed JSON: {exc.msg}", line=lineno) from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}", line=lineno, dimension=exc.dimension) from None
    return archs


def dump_architecture(arch: ArchitectureSpec) -> str:
    return json.dumps(arch.to_dict(), sort_keys=True, separators=(",", ":"))
