import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capnas import archspace as A
from capnas.errors import SpaceTooLargeError, ValidationError

from _toys import encoder_space


def one_layer(hidden=128, attn=128, ffn=512, layers=1):
    space = encoder_space(hidden=(hidden,), attn=(attn,), ffn=(ffn,), layers=(layers,))
    return space, A.sample_architecture(space, 0)


# --- shapes ------------------------------------------------------------------

def test_one_layer_shapes():
    space, arch = one_layer()
    scored = [s for s in A.enumerate_shapes(arch, space) if s.block != "other"]
    assert [(s.name, s.rows, s.cols, s.block) for s in scored] == [
        ("q", 128, 128, "attention"), ("k", 128, 128, "attention"), ("v", 128, 128, "attention"),
        ("o", 128, 128, "attention"), ("f1", 512, 128, "ffn"), ("f2", 128, 512, "ffn"),
    ]


def test_two_identical_layers_are_layer_major():
    space, arch = one_layer(layers=2)
    scored = [s for s in A.enumerate_shapes(arch, space) if s.block != "other"]
    assert len(scored) == 12
    assert [s.layer for s in scored] == [0] * 6 + [1] * 6
    assert [s.name for s in scored[:6]] == [s.name for s in scored[6:]]


def test_gpt2_grid_expansion():
    space = A.load_template("gpt2")
    gcfg = {"num_layers": 3, "d_model": 256, "d_embed": 256, "div_val": 2}
    arch = A.make_arch(space, gcfg, [{"d_inner": 1024, "n_head": 4}] * 3)
    shapes = A.enumerate_shapes(arch, space)
    transformer = [s for s in shapes if s.block != "other"]
    assert len(transformer) == 18
    assert sum(s.block == "attention" for s in transformer) == 12
    assert {(s.rows, s.cols) for s in transformer if s.name == "f1"} == {(1024, 256)}
    others = {s.name for s in shapes if s.block == "other"}
    assert {"emb_c0", "emb_c3", "proj_c0", "ln_f"} <= others
    emb = {s.name: s for s in shapes}
    assert emb["emb_c2"].cols == 256 // 4


def test_invalid_value_names_dimension():
    space, arch = one_layer()
    bad = A.ArchitectureSpec("x", 1, ({"attn_dim": 128, "ffn_dim": 999},), {"num_layers": 1, "hidden": 128})
    with pytest.raises(ValidationError) as err:
        A.enumerate_shapes(bad, space)
    assert err.value.dimension == "ffn_dim"
    assert "ffn_dim" in str(err.value)


def test_layer_count_mismatch_rejected():
    with pytest.raises(ValidationError):
        A.ArchitectureSpec("x", 2, ({"attn_dim": 128},), {"num_layers": 2})


def test_unknown_and_missing_dimensions():
    space, _ = one_layer()
    extra = A.ArchitectureSpec("x", 1, ({"attn_dim": 128, "ffn_dim": 512, "heads": 2},),
                               {"num_layers": 1, "hidden": 128})
    missing = A.ArchitectureSpec("x", 1, ({"attn_dim": 128},), {"num_layers": 1, "hidden": 128})
    assert not A.is_valid(extra, space)
    assert not A.is_valid(missing, space)


def test_constraint_violation_rejected():
    space = A.load_template("gpt2")
    arch = A.make_arch(space, {"num_layers": 2, "d_model": 512, "d_embed": 128, "div_val": 1},
                       [{"d_inner": 768, "n_head": 2}] * 2)
    with pytest.raises(ValidationError, match="d_inner >= 2 \\* d_model"):
        A.validate(arch, space)


def test_repeat_templates_expand_with_suffixes():
    space = A.load_template("flexibert")
    arch = A.make_arch(space, {"num_layers": 2, "hidden": 128},
                       [{"attention_op": "dynamic_conv/kernel5", "heads": 2, "ffn_dim": 512, "ffn_stacks": 3},
                        {"attention_op": "self_attention/multiplicative", "heads": 4, "ffn_dim": 1024,
                         "ffn_stacks": 1}])
    names = [s.name for s in A.enumerate_shapes(arch, space) if s.block == "ffn"]
    assert names == ["f1", "f_mid1", "f_mid2", "f2", "f1", "f2"]


# --- params and tflops ---------------------------------------------------------

def test_single_matrix_params():
    space = A.space_from_dict({
        "schema_version": 1, "name": "one", "kind": "homogeneous",
        "dimensions": [{"name": "num_layers", "values": [1]}],
        "layer_modules": [{"name": "w", "block": "ffn", "rows": 128, "cols": 128}],
    })
    assert A.count_params(A.sample_architecture(space, 0), space) == 16384


def test_one_layer_params():
    space, arch = one_layer()
    assert A.count_params(arch, space) == 4 * 128 * 128 + 2 * 512 * 128 == 196608
    assert A.count_params(arch, space, include_other=True) == 196608 + 128 + 1000 * 128


def test_bert_base_params_against_closed_form():
    space, arch = one_layer(hidden=768, attn=768, ffn=3072, layers=12)
    hidden, inner, layers = 768, 3072, 12
    closed_form = layers * (4 * hidden ** 2 + 2 * hidden * inner)
    assert A.count_params(arch, space) == closed_form == 84934656


def test_bias_flag_adds_output_dims():
    space = encoder_space(bias=True)
    arch = A.sample_architecture(space, 0)
    assert A.count_params(arch, space) == 196608 + 4 * 128 + 512 + 128


def test_tflops_hand_value():
    space, arch = one_layer()
    seq = 128
    expected = (2 * 196608 * seq + 2 * seq * seq * 128) / 1e12
    assert A.estimate_tflops(arch, space, seq) == pytest.approx(expected, rel=1e-15)


def test_zero_layer_arch_has_zero_tflops():
    space = encoder_space(layers=(0,))
    arch = A.sample_architecture(space, 3)
    assert arch.num_layers == 0
    assert A.estimate_tflops(arch, space) == 0.0


def test_doubling_ffn_increases_tflops():
    a_space, a = one_layer(ffn=512)
    b_space, b = one_layer(ffn=1024)
    assert A.estimate_tflops(b, b_space) > A.estimate_tflops(a, a_space)


def test_tflops_rejects_bad_seq_len():
    space, arch = one_layer()
    with pytest.raises(ValidationError):
        A.estimate_tflops(arch, space, 0)


# --- sampling ------------------------------------------------------------------

def test_singleton_space_gives_same_arch_for_any_seed():
    space, _ = one_layer()
    ids = {A.sample_architecture(space, seed).id for seed in (0, 1, 2**63, -5)}
    assert len(ids) == 1


def test_sampling_is_deterministic():
    space = A.load_template("flexibert")
    assert A.sample_architecture(space, 42) == A.sample_architecture(space, 42)
    assert A.sample_architecture(space, 42).id != A.sample_architecture(space, 43).id


def test_two_value_frequency_within_three_sigma():
    space = encoder_space(ffn=(256, 512))
    rng = np.random.default_rng(7)
    n = 100_000
    hits = sum(A.sample_with(space, rng).layers[0]["ffn_dim"] == 512 for _ in range(n))
    assert abs(hits - n / 2) <= 3 * math.sqrt(n * 0.25)


def test_sampling_respects_constraints():
    space = A.load_template("gpt2")
    for seed in range(30):
        arch = A.sample_architecture(space, seed)
        A.validate(arch, space)
        assert all(layer["d_inner"] >= 2 * arch.global_config["d_model"] for layer in arch.layers)


def test_per_layer_lists_are_respected():
    space = A.load_template("lonas-bert")
    for seed in range(5):
        arch = A.sample_architecture(space, seed)
        assert arch.layers[9]["attn_dim"] in (768, 192)
        assert arch.layers[10]["attn_dim"] in (768, 704, 192)


# --- space size ---------------------------------------------------------------

def test_single_global_dimension_size():
    space = A.space_from_dict({
        "schema_version": 1, "name": "s", "kind": "homogeneous",
        "dimensions": [{"name": "num_layers", "values": [1]}, {"name": "width", "values": [1, 2, 3]}],
        "layer_modules": [{"name": "w", "block": "ffn", "rows": "width", "cols": 4}],
    })
    assert A.space_size(space) == 3


@pytest.mark.parametrize("name, size", [
    ("flexibert", 10_621_440),
    ("lonas-bert", 3 ** 25 * 2 ** 11),
    ("lonas-llama", 2 ** 64 * 5 ** 32),
])
def test_template_sizes(name, size):
    assert A.space_size(A.load_template(name)) == size


def test_gpt2_size_is_exact_python_int():
    size = A.space_size(A.load_template("gpt2"))
    assert isinstance(size, int) and size > 2 ** 64  # would have wrapped in fixed-width arithmetic


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from([16, 32, 48, 64]), min_size=1, max_size=3, unique=True),
       st.lists(st.sampled_from([16, 32, 64, 96, 128]), min_size=1, max_size=3, unique=True),
       st.lists(st.integers(1, 3), min_size=1, max_size=2, unique=True))
def test_size_matches_enumeration(attn, ffn, layers):
    space = encoder_space(hidden=(32, 64), attn=attn, ffn=ffn, layers=layers,
                          constraints=["ffn_dim >= attn_dim", "hidden >= 32"])
    archs = list(A.iter_architectures(space))
    assert len(archs) == A.space_size(space)
    assert len({a.id for a in archs}) == len(archs)
    for a in archs:
        A.validate(a, space)


def test_iter_architectures_refuses_large_spaces():
    with pytest.raises(SpaceTooLargeError) as err:
        next(A.iter_architectures(A.load_template("flexibert")))
    assert err.value.size == 10_621_440


# --- properties ---------------------------------------------------------------

SPACE = encoder_space(hidden=(64, 128), attn=(32, 64, 128), ffn=(128, 256, 512), layers=(1, 2, 3), lora=(2, 4))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_sampled_archs_validate_and_params_resum(seed):
    arch = A.sample_architecture(SPACE, seed)
    A.validate(arch, SPACE)
    shapes = A.enumerate_shapes(arch, SPACE)
    assert shapes == A.enumerate_shapes(arch, SPACE)
    assert A.count_params(arch, SPACE) == sum(s.rows * s.cols for s in shapes if s.block != "other")
    assert len({s.index for s in shapes}) == len(shapes)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["attn_dim", "ffn_dim", "lora_rank", "hidden"]), st.data())
def test_tflops_strictly_monotone(seed, dim_name, data):
    arch = A.sample_architecture(SPACE, seed)
    gcfg = dict(arch.global_config)
    layers = [dict(layer) for layer in arch.layers]
    values = SPACE.dimension(dim_name).values
    if dim_name == "hidden":
        current = gcfg["hidden"]
    else:
        layer = data.draw(st.integers(0, arch.num_layers - 1))
        current = layers[layer][dim_name]
    bigger = [v for v in values if v > current]
    if not bigger:
        return
    if dim_name == "hidden":
        gcfg["hidden"] = bigger[0]
    else:
        layers[layer][dim_name] = bigger[0]
    grown = A.make_arch(SPACE, gcfg, layers)
    assert A.estimate_tflops(grown, SPACE) > A.estimate_tflops(arch, SPACE)


# --- ids and files --------------------------------------------------------------

def test_equal_configs_share_ids_and_round_trip():
    arch = A.sample_architecture(SPACE, 11)
    again = A.make_arch(SPACE, dict(arch.global_config), [dict(x) for x in arch.layers])
    assert again.id == arch.id and again == arch and hash(again) == hash(arch)
    back = A.ArchitectureSpec.from_dict(json.loads(A.dump_architecture(arch)))
    assert back == arch


def test_architecture_is_immutable():
    arch = A.sample_architecture(SPACE, 1)
    with pytest.raises(TypeError):
        arch.layers[0]["ffn_dim"] = 1


@pytest.mark.parametrize("name", A.template_names())
def test_template_dump_round_trip(name, tmp_path):
    space = A.load_template(name)
    path = tmp_path / f"{name}.yaml"
    path.write_text(A.dump_space(space))
    again = A.load_space(path)
    assert A.space_to_dict(again) == A.space_to_dict(space)
    assert A.space_size(again) == A.space_size(space)


def test_load_architectures_formats(tmp_path):
    archs = [A.sample_architecture(SPACE, s) for s in range(3)]
    jsonl = tmp_path / "a.jsonl"
    jsonl.write_text("".join(A.dump_architecture(a) + "\n" for a in archs))
    listing = tmp_path / "a.json"
    listing.write_text(json.dumps([a.to_dict() for a in archs]))
    assert A.load_architectures(jsonl) == archs == A.load_architectures(listing)
    bad = tmp_path / "bad.jsonl"
    bad.write_text(A.dump_architecture(archs[0]) + "\n{not json\n")
    with pytest.raises(ValidationError, match="line 2"):
        A.load_architectures(bad)


def test_space_file_errors(tmp_path):
    bad_version = tmp_path / "v.yaml"
    bad_version.write_text("schema_version: 9\nname: x\nkind: homogeneous\ndimensions: []\n")
    with pytest.raises(ValidationError, match="schema_version"):
        A.load_space(bad_version)
    with pytest.raises(ValidationError, match="duplicate"):
        A.space_from_dict({"schema_version": 1, "name": "d", "kind": "homogeneous",
                           "dimensions": [{"name": "num_layers", "values": [1, 1]}], "layer_modules": []})
    with pytest.raises(ValidationError, match="unknown space template"):
        A.resolve_space("no-such-space")


def test_expression_language_rejects_unsafe_syntax():
    from capnas import _expr

    with pytest.raises(ValidationError):
        _expr.evaluate("__import__('os')", {})
    with pytest.raises(ValidationError):
        _expr.evaluate("x.real", {"x": 1})
    assert _expr.evaluate("max(a, 2 * b) // 3", {"a": 5, "b": 4}) == 2
