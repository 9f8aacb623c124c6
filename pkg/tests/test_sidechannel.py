import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from veilvm.engine import Engine, EngineConfig
from veilvm.isa import ClassLatency, LatencyModel, default_latency_model
from veilvm.rewriter import (
    PATTERN_VARIANTS,
    VARIANT_I,
    VARIANT_II,
    VARIANT_III,
    VARIANT_IV,
    VARIANT_V,
    VARIANTS,
)
from veilvm.sidechannel import (
    AttackerView,
    InsufficientTraces,
    abba_benchmark,
    build_skeleton,
    ciphertext_labeling,
    classify,
    distinguish_blocks,
    make_views,
    sample_latencies,
    welch_t,
)

from conftest import compiled

MODEXP_INPUT = {6: 7, 7: 0xB38A, 3: 1000003}


def run_variant(variant, seed=0, **cfg_kw):
    tr = compiled("modexp", variant)
    eng = Engine(tr, EngineConfig(variant=variant, seed=seed, **cfg_kw))
    res = eng.run(regs=dict(MODEXP_INPUT))
    return tr, eng, res


# --- Welch's t -------------------------------------------------------------


def test_identical_samples_give_zero():
    a = [3.0, 4.0, 5.0, 6.0]
    r = welch_t(a, a)
    assert r.t == 0.0
    assert not r.distinguishable


def test_hand_computed_five_element_example():
    r = welch_t([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
    assert abs(r.t - (-5.0)) < 1e-9
    assert r.distinguishable


def test_degenerate_variance_cases():
    same = welch_t([2.0, 2.0], [2.0, 2.0])
    assert same.t == 0.0 and not same.distinguishable
    diff = welch_t([2.0, 2.0], [3.0, 3.0])
    assert math.isinf(diff.t) and diff.distinguishable


def test_sample_minimum():
    with pytest.raises(InsufficientTraces):
        welch_t([1.0], [2.0, 3.0])


def test_progression_checkpoints():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, 5000)
    b = rng.normal(0, 1, 5000)
    r = welch_t(a, b)
    ns = [n for n, _ in r.progression]
    assert ns == [100, 1000, 5000]
    assert r.progression[-1][1] == r.t


@given(
    st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40),
    st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40),
    st.floats(0.5, 3.0),
    st.floats(-50, 50),
)
@settings(max_examples=60, deadline=None)
def test_symmetry_and_affine_invariance(a, b, scale, shift):
    ta = welch_t(a, b).t
    tb = welch_t(b, a).t
    assert ta == -tb or (math.isinf(ta) and math.isinf(tb))
    a2 = [scale * x + shift for x in a]
    b2 = [scale * x + shift for x in b]
    t2 = welch_t(a2, b2).t
    if math.isfinite(ta):
        assert abs(abs(t2) - abs(ta)) < 1e-6 * max(1.0, abs(ta))


# --- ABBA gadget -----------------------------------------------------------


def test_mov_vs_imul_indistinguishable():
    s1, s2 = abba_benchmark("mov", "imul", 100_000, seed=0)
    assert not welch_t(s1, s2).distinguishable


def test_mov_vs_div_distinguishable():
    s1, s2 = abba_benchmark("mov", "div", 10_000, seed=0)
    r = welch_t(s1, s2)
    assert r.distinguishable
    # |t| grows with the sample count.
    prog = dict(r.progression)
    assert abs(r.t) > abs(prog[100])


def test_inc_vs_inc_sanity():
    s1, s2 = abba_benchmark("inc", "inc", 100_000, seed=1)
    assert not welch_t(s1, s2).distinguishable


def test_unknown_opcode_and_bad_n():
    with pytest.raises(ValueError):
        abba_benchmark("frob", "mov", 10)
    with pytest.raises(ValueError):
        abba_benchmark("mov", "mov", 0)


def test_div_operand_leak_mode():
    base = default_latency_model()
    s1, s2 = abba_benchmark("div", "div", 50_000, base, seed=2, operand_bits=(8, 40))
    assert not welch_t(s1, s2).distinguishable  # mode off by default
    leaky = default_latency_model(div_operand_leak=True)
    s1, s2 = abba_benchmark("div", "div", 50_000, leaky, seed=2, operand_bits=(8, 40))
    assert welch_t(s1, s2).distinguishable


# --- Classification ---------------------------------------------------------


def test_default_model_yields_two_classes():
    result = classify(n=4000, seed=0)
    assert len(result.classes) == 2
    assert ("div",) in result.classes
    assert not result.warnings


def test_single_opcode_single_class():
    result = classify(opcodes=["add"], n=100)
    assert result.classes == (("add",),)


def test_three_mean_model_three_classes():
    model = default_latency_model()
    model = LatencyModel(
        classes=model.classes,
        overrides={"imul": ClassLatency(13000.0, 200.0)},
    )
    result = classify(opcodes=["mov", "add", "imul", "div"], n=4000, model=model, seed=0)
    assert len(result.classes) == 3
    assert ("imul",) in result.classes and ("div",) in result.classes


def test_non_transitive_component_warns():
    # A wide noisy distribution bridges two tight, clearly separated ones:
    # both bridge pairs stay under the threshold while the extremes exceed
    # it, so the merged component loses transitivity and gets flagged.
    model = default_latency_model()
    model = LatencyModel(
        classes=model.classes,
        overrides={
            "mov": ClassLatency(11000.0, 50.0, tail_p=0.0),
            "add": ClassLatency(11002.0, 2000.0, tail_p=0.0),
            "imul": ClassLatency(11004.0, 50.0, tail_p=0.0),
        },
    )
    result = classify(opcodes=["mov", "add", "imul"], n=20_000, model=model, seed=3)
    assert len(result.classes) == 1
    assert result.warnings


def test_classify_requires_samples():
    with pytest.raises(ValueError):
        classify(n=1)


# --- Latency sampling -------------------------------------------------------


def test_alignment_penalty_applies_to_payloads_only():
    model = default_latency_model(alignment_penalty=50.0)
    retires = [("class1", 0, False), ("class1", 3, False), ("class1", 3, True)]
    rng = np.random.default_rng(0)
    s = sample_latencies(retires, 200_000, model, rng)
    means = s.mean(axis=0)
    assert means[1] - means[0] > 100  # 3-byte misalignment penalty
    assert abs(means[2] - means[0]) < 10  # fills are exempt


# --- Block distinguishing ----------------------------------------------------


def test_variant_ladder_on_modexp():
    succeeded = {}
    for variant in VARIANTS:
        tr, eng, res = run_variant(variant)
        rep = distinguish_blocks(tr, res.trace, eng, "sqonly", "sqmul", 3000, seed=5)
        succeeded[variant] = rep.succeeded()
    assert "count" in succeeded[VARIANT_I]
    assert "count" not in succeeded[VARIANT_II]
    assert "latency" in succeeded[VARIANT_II]
    assert succeeded[VARIANT_III] == {"ciphertext"}
    assert succeeded[VARIANT_IV] == {"ciphertext"}
    assert succeeded[VARIANT_V] == set()
    order = [succeeded[v] for v in VARIANTS]
    assert all(order[i + 1] <= order[i] for i in range(len(order) - 1))


def test_latency_attack_flags_div_slot_under_ii():
    tr, eng, res = run_variant(VARIANT_II)
    rep = distinguish_blocks(tr, res.trace, eng, "sqonly", "sqmul", 3000, seed=7)
    assert rep.flagged_slots
    # Flagged retire index must map to a class2 cell of the sqmul block.
    b_id = tr.first_block[("modexp", "sqmul")]
    retires = tr.blocks[b_id].retires()
    for slot in rep.flagged_slots:
        assert retires[slot][0] == "class2"


def test_alignment_leak_separates_iii_from_iv():
    leaky = default_latency_model(alignment_penalty=30.0)
    tr3, eng3, res3 = run_variant(VARIANT_III)
    rep3 = distinguish_blocks(tr3, res3.trace, eng3, "sqonly", "sqmul", 5000,
                              seed=11, model=leaky)
    tr4, eng4, res4 = run_variant(VARIANT_IV)
    rep4 = distinguish_blocks(tr4, res4.trace, eng4, "sqonly", "sqmul", 5000,
                              seed=11, model=leaky)
    assert rep3.flagged_slots
    assert not rep4.flagged_slots


def test_ciphertext_labeling_fixed_location():
    tr, eng, res = run_variant(VARIANT_IV)
    ske = build_skeleton(tr, res.trace, eng)
    rep = ciphertext_labeling(ske, 50, seed=0)
    assert rep.reuse_at is not None and rep.reuse_at <= 10
    assert rep.accuracy == 1.0
    assert rep.injective


def test_ciphertext_labeling_rotation_at_chance():
    tr, eng, res = run_variant(VARIANT_V)
    ske = build_skeleton(tr, res.trace, eng)
    a = tr.first_block[("modexp", "sqonly")]
    b = tr.first_block[("modexp", "sqmul")]
    rep = ciphertext_labeling(ske, 4000, seed=1, targets={a, b})
    assert rep.injective
    assert rep.accuracy <= rep.chance + 0.05


def test_views_expose_only_public_fields():
    tr, eng, res = run_variant(VARIANT_V)
    ske = build_skeleton(tr, res.trace, eng)
    views = make_views(ske, 3, seed=2)
    assert len(views) == 3
    v = views[0]
    assert set(AttackerView.__dataclass_fields__) == {"tags", "locations", "counts", "data_kinds"}
    text = v.to_text()
    assert "block" not in text
    assert len(v.tags) == len(ske.fetch_blocks)


def test_insufficient_traces():
    tr, eng, res = run_variant(VARIANT_IV)
    with pytest.raises(InsufficientTraces):
        distinguish_blocks(tr, res.trace, eng, "sqonly", "sqmul", 1)
    with pytest.raises(InsufficientTraces):
        # Target never executed: exponent 0 has no one-bits.
        eng2 = Engine(tr, EngineConfig(variant=VARIANT_IV, seed=0))
        res2 = eng2.run(regs={6: 3, 7: 0, 3: 7})
        distinguish_blocks(tr, res2.trace, eng2, "sqonly", "sqmul", 100)
