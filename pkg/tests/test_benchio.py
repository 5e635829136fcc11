import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capnas import archspace as A
from capnas import benchio as B
from capnas.alphaopt import optimize_alpha_sampling
from capnas.capacity import ModuleScoreCache, WeightInitPolicy, combine, score_blocks
from capnas.errors import DegenerateInputError, ValidationError
from capnas.rankstats import kendall_tau

from _toys import encoder_space, recovery_space


CACHE = ModuleScoreCache()


@pytest.fixture(scope="module")
def space():
    return encoder_space(name="bench-toy", hidden=(64,), attn=(32, 64, 96, 128), ffn=(64, 128, 256, 512),
                         layers=(2, 3, 4), lora=(2, 4, 8))


@pytest.fixture(scope="module")
def synth(space):
    return B.synth_benchmark(space, 60, 0.3, 0.0, seed=1, cache=CACHE)


@pytest.fixture(scope="module")
def bert():
    return A.load_template("lonas-bert")


# --- records and files ----------------------------------------------------------

def test_metric_names_are_normalized():
    arch = A.sample_architecture(encoder_space(), 0)
    record = B.BenchmarkRecord(arch, {"GLUE-Score": 1, "Test PPL": "2.5"})
    assert record.metrics == {"glue_score": 1.0, "test_ppl": 2.5}
    with pytest.raises(ValidationError):
        B.BenchmarkRecord(arch, {})
    with pytest.raises(ValidationError):
        B.BenchmarkRecord(arch, {"acc": "high"})
    with pytest.raises(ValidationError):
        B.normalize_metric_name("9lives")


def test_single_record_round_trip(tmp_path, bert):
    record = B.BenchmarkRecord(A.sample_architecture(bert, 4), {"acc": 0.1 + 0.2})
    first = tmp_path / "one.jsonl"
    B.save_benchmark(first, [record])
    loaded = B.load_benchmark(first, bert)
    assert loaded == [record]
    second = tmp_path / "two.jsonl"
    B.save_benchmark(second, loaded)
    assert first.read_bytes() == second.read_bytes()


def test_synthetic_round_trip_is_byte_identical(tmp_path, space, synth):
    path = tmp_path / "bench.jsonl"
    B.save_benchmark(path, synth)
    again = tmp_path / "again.jsonl"
    B.save_benchmark(again, B.load_benchmark(path, space))
    assert path.read_bytes() == again.read_bytes()
    assert len(path.read_text().splitlines()) == 60


def test_empty_file_warns(tmp_path, bert):
    path = tmp_path / "empty.jsonl"
    path.write_text("\n")
    with pytest.warns(UserWarning, match="no records"):
        assert B.load_benchmark(path, bert) == []


def good_line(space, seed=0, metrics=None):
    return B.dump_record(B.BenchmarkRecord(A.sample_architecture(space, seed), metrics or {"acc": 0.5}))


def bad_lines(space):
    good = good_line(space)
    data = json.loads(good)
    yield "malformed", "{not json"
    yield "schema", json.dumps({**data, "schema_version": 99})
    yield "space", json.dumps({**data, "space": "gpt2"})
    layer = dict(data["layers"][0])
    key = sorted(k for k in layer if k != "lora_rank")[0] if len(layer) > 1 else next(iter(layer))
    layer[key] = 123457
    yield "value", json.dumps({**data, "layers": [layer] + data["layers"][1:]})
    yield "duplicate", good


@pytest.mark.parametrize("kind", ["malformed", "schema", "space", "value", "duplicate"])
def test_errors_carry_line_number(bert, kind):
    bad = dict(bad_lines(bert))[kind]
    lines = [good_line(bert), "", bad]
    with pytest.raises(ValidationError) as err:
        B.parse_benchmark_lines(lines, bert)
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_value_error_names_dimension(bert):
    bad = dict(bad_lines(bert))["value"]
    with pytest.raises(ValidationError) as err:
        B.parse_benchmark_lines([bad], bert)
    assert err.value.dimension is not None
    assert err.value.dimension in str(err.value)


def test_metric_names_listing(bert):
    records = [B.BenchmarkRecord(A.sample_architecture(bert, i), {"acc": i, "asr": -i}) for i in range(3)]
    assert B.metric_names(records) == ["acc", "asr"]


# --- proxy evaluation ---------------------------------------------------------------

def test_self_correlation_is_perfect(space, synth):
    scores, _ = B.proxy_scores([r.arch for r in synth], space, "capacity", alpha=0.8, cache=CACHE)
    same = [B.BenchmarkRecord(r.arch, {"truth": s}) for r, s in zip(synth, scores)]
    report = B.evaluate_proxy(same, space, "capacity", "truth", alpha=0.8, cache=CACHE)
    assert report.kt == 1.0 and report.spr == 1.0
    flipped = [B.BenchmarkRecord(r.arch, {"truth": -s}) for r, s in zip(synth, scores)]
    report = B.evaluate_proxy(flipped, space, "capacity", "truth", alpha=0.8, cache=CACHE)
    assert report.kt == -1.0 and report.spr == -1.0


def test_noiseless_synthetic_gives_exact_kendall(space, synth):
    report = B.evaluate_proxy(synth, space, "capacity", "synthetic_score", alpha=0.3, cache=CACHE)
    assert report.kt == 1.0
    assert report.n == 60 and report.alpha == 0.3
    assert report.mean_score_time > 0
    assert report.init_policy == WeightInitPolicy().describe()


def test_capacity_beats_params_on_synthetic_truth(space):
    records = B.synth_benchmark(space, 150, 0.3, 0.01, seed=7, cache=CACHE)
    cap = B.evaluate_proxy(records, space, "capacity", "synthetic_score", alpha=0.3, cache=CACHE)
    params = B.evaluate_proxy(records, space, "params", "synthetic_score")
    assert cap.kt > params.kt
    assert params.alpha is None


def test_params_proxy_ignores_init_policy(space, synth):
    a = B.evaluate_proxy(synth, space, "params", "synthetic_score")
    b = B.evaluate_proxy(synth, space, "params", "synthetic_score", policy=WeightInitPolicy(seed=5, std=1.0))
    assert (a.kt, a.spr) == (b.kt, b.spr)


NOISY = encoder_space(name="noisy", hidden=(64,), attn=(32, 64, 96), ffn=(64, 128, 256), layers=(2,))
NOISY_RECORDS = B.synth_benchmark(NOISY, 20, 0.5, 0.05, seed=3, cache=CACHE)


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(20)))
def test_kendall_is_order_free(order):
    base = B.evaluate_proxy(NOISY_RECORDS, NOISY, "capacity", "synthetic_score", alpha=0.2, cache=CACHE)
    shuffled = [NOISY_RECORDS[i] for i in order]
    assert B.evaluate_proxy(shuffled, NOISY, "capacity", "synthetic_score", alpha=0.2, cache=CACHE).kt == base.kt


@pytest.mark.parametrize("proxy", B.PROXIES)
def test_every_proxy_produces_a_report(space, synth, proxy):
    report = B.evaluate_proxy(synth[:12], space, proxy, "synthetic_score", alpha=0.5)
    assert -1.0 <= report.kt <= 1.0 and -1.0 <= report.spr <= 1.0


def test_evaluation_input_checks(space, synth):
    with pytest.raises(ValidationError, match="at least 3"):
        B.evaluate_proxy(synth[:2], space, "params", "synthetic_score")
    with pytest.raises(ValidationError, match="available: synthetic_score"):
        B.evaluate_proxy(synth, space, "params", "glue_score")
    with pytest.raises(ValidationError, match="unknown proxy"):
        B.evaluate_proxy(synth, space, "zen", "synthetic_score")
    with pytest.raises(ValidationError, match="alpha"):
        B.evaluate_proxy(synth, space, "capacity", "synthetic_score")


def test_constant_metric_is_degenerate(space, synth):
    flat = [B.BenchmarkRecord(r.arch, {"m": 1.0}) for r in synth[:5]]
    with pytest.raises(DegenerateInputError):
        B.evaluate_proxy(flat, space, "params", "m")


def test_workers_do_not_change_scores(space, synth):
    archs = [r.arch for r in synth[:20]]
    serial, _ = B.proxy_scores(archs, space, "capacity", alpha=0.4)
    threaded, _ = B.proxy_scores(archs, space, "capacity", alpha=0.4, workers=4)
    assert np.array_equal(serial, threaded)


def test_scatter_rows_and_csv(space, synth):
    scores, _ = B.proxy_scores([r.arch for r in synth[:10]], space, "params")
    rows = B.scatter_rows(synth[:10], scores, "synthetic_score")
    assert len(rows) == 10
    assert sorted(r["metric_rank"] for r in rows) == [float(i) for i in range(1, 11)]
    top = max(rows, key=lambda r: r["metric"])
    assert top["metric_rank"] == 1.0
    buf = io.StringIO()
    B.write_csv(buf, rows)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "id,metric,proxy,metric_rank,proxy_rank"
    assert len(lines) == 11


def test_report_dict_has_table_columns(space, synth):
    d = B.evaluate_proxy(synth, space, "params", "synthetic_score").to_dict()
    assert {"proxy", "metric", "spr", "kt", "n", "mean_score_time", "alpha", "init_policy"} <= set(d)
    assert d["kendall_variant"] == "tau-b"


# --- synthetic generation -----------------------------------------------------------

def test_synthetic_is_deterministic(space):
    a = B.synth_benchmark(space, 15, 0.3, 0.02, seed=4)
    b = B.synth_benchmark(space, 15, 0.3, 0.02, seed=4)
    assert a == b
    assert len({r.arch.id for r in a}) == 15


def test_synthetic_metric_is_scaled_blend(space, synth):
    values = np.array([r.metrics["synthetic_score"] for r in synth])
    assert values.min() == 0.0 and values.max() == 1.0
    blend = np.array([combine(score_blocks(r.arch, space), 0.3) for r in synth])
    expected = (blend - blend.min()) / (blend.max() - blend.min())
    assert np.allclose(values, expected, rtol=0, atol=1e-12)


def collision_probability(space):
    """Chance that two independent draws are identical under per-dimension uniform sampling."""
    per_layer = math.prod(len(d.values) for d in space.layer_dims)
    layers = space.dimension("num_layers").values
    n_globals = math.prod(len(d.values) for d in space.global_dims if d.name != "num_layers")
    return sum((1 / len(layers)) ** 2 / n_globals / per_layer ** n for n in layers)


def test_seed_collisions_match_birthday_estimate():
    space = A.load_template("flexibert")
    n = 100
    one = {r.arch.id for r in B.synth_benchmark(space, n, 0.5, 0.0, seed=0, cache=CACHE)}
    two = {r.arch.id for r in B.synth_benchmark(space, n, 0.5, 0.0, seed=1, cache=CACHE)}
    expected = n * n * collision_probability(space)
    assert 0.3 < expected < 1.0  # short models dominate the draw, so a few collisions are normal
    # Poisson(expected) exceeds 6 with probability below 1e-5
    assert len(one & two) <= 6
    big = A.load_template("lonas-bert")
    assert n * n * collision_probability(big) < 1e-6


def test_noiseless_recovery_within_one_grid_step():
    space = recovery_space()
    cache = ModuleScoreCache()
    for true_alpha in (-0.5, 0.0, 0.3, 0.8):
        records = B.synth_benchmark(space, 200, true_alpha, 0.0, seed=11, cache=cache)
        archs = [r.arch for r in records]
        attn, _ = B.proxy_scores(archs, space, "attn_only", cache=cache)
        ffn, _ = B.proxy_scores(archs, space, "ffn_only", cache=cache)
        gt = [r.metrics["synthetic_score"] for r in records]
        result = optimize_alpha_sampling(gt, attn, ffn)
        assert abs(result.alpha_star - true_alpha) <= 0.1 + 1e-12


def test_synthetic_input_checks(space):
    with pytest.raises(ValidationError):
        B.synth_benchmark(space, 9, 0.3, 0.0, seed=0)
    with pytest.raises(ValidationError):
        B.synth_benchmark(space, 10, 0.3, -0.1, seed=0)
    with pytest.raises(ValidationError, match="distinct"):
        B.synth_benchmark(encoder_space(), 10, 0.3, 0.0, seed=0)


# --- heuristic inputs ------------------------------------------------------------------

def test_heuristic_inputs_need_ten(bert):
    archs = [A.sample_architecture(bert, i) for i in range(9)]
    with pytest.raises(ValidationError, match="k >= 10"):
        B.heuristic_inputs_from_sample(archs, bert)


def test_heuristic_inputs_are_reproducible():
    space = A.load_template("flexibert")
    rng = np.random.default_rng([0, 0xA1FA])
    archs = B.sample_unique(space, 50, rng)
    first = B.heuristic_inputs_from_sample(archs, space, cache=CACHE)
    again = B.heuristic_inputs_from_sample(archs, space, cache=ModuleScoreCache())
    assert first == again
    assert all(-1.0 <= t <= 1.0 for t in (first.tau_ap, first.tau_fp, first.tau_af))


def test_fixed_ffn_makes_tau_fp_degenerate():
    space = encoder_space(name="fixed-ffn", hidden=(64,), attn=(32, 64, 96, 128), ffn=(128,), layers=(2,))
    archs = B.sample_unique(space, 12, np.random.default_rng(0))
    with pytest.raises(DegenerateInputError):
        B.heuristic_inputs_from_sample(archs, space)


def test_params_driven_by_ffn_only_gives_unit_tau_fp():
    # attention is fixed, so only the FFN-versus-params tau is defined here
    space = encoder_space(name="ffn-only", hidden=(64,), attn=(64,), ffn=(64, 128, 192, 256, 320, 384),
                          layers=(1,))
    archs = list(A.iter_architectures(space))
    ffn = [score_blocks(a, space).total_ffn for a in archs]
    params = [A.count_params(a, space) for a in archs]
    assert kendall_tau(ffn, params) == 1.0
