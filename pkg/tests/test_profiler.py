import warnings

import pytest

from veilvm.isa import CLASS1, CLASS2, LOAD, PTRADJUST, STORE
from veilvm.parser import parse_program
from veilvm.profiler import (
    ExternalCall,
    RecursionLimit,
    build_call_tree,
    loop_depths,
    lower_unit,
    profile,
)

from conftest import sample_program, sample_unit


def test_leaf_root_unit_has_one_function():
    unit = build_call_tree(sample_program("modexp"), "modexp")
    assert list(unit.functions) == ["modexp"]
    assert unit.slab_entries() == 0


def test_call_chain_clones_all_bodies():
    text = (
        "@protect\nfunc root:\n    call f\n    ret\nendfunc\n"
        "func f:\n    call g\n    ret\nendfunc\n"
        "func g:\n    inc r0\n    ret\nendfunc\n"
    )
    unit = build_call_tree(parse_program(text), "root")
    assert sorted(unit.functions) == ["f", "g", "root"]
    assert unit.call_depth == {"root": 0, "f": 1, "g": 2}
    assert unit.slab_entries() == 2


def test_shared_callee_cloned_once():
    text = (
        "@protect\nfunc root:\n    call f\n    call g\n    ret\nendfunc\n"
        "func f:\n    call g\n    ret\nendfunc\n"
        "func g:\n    inc r0\n    ret\nendfunc\n"
    )
    unit = build_call_tree(parse_program(text), "root")
    assert sorted(unit.functions) == ["f", "g", "root"]
    assert unit.call_depth["g"] == 2  # deepest path wins


def test_external_call_rejected():
    text = "@protect\nfunc root:\n    call printf\n    ret\nendfunc\n"
    with pytest.raises(ExternalCall):
        build_call_tree(parse_program(text), "root")


def test_recursion_rejected():
    text = (
        "@protect\nfunc root:\n    call f\n    ret\nendfunc\n"
        "func f:\n    call f\n    ret\nendfunc\n"
    )
    with pytest.raises(RecursionLimit):
        build_call_tree(parse_program(text), "root")


def test_unprotected_root_rejected():
    with pytest.raises(ValueError):
        build_call_tree(sample_program("modexp"), "nosuch")
    text = "func plain:\n    ret\nendfunc\n"
    with pytest.raises(ValueError):
        build_call_tree(parse_program(text), "plain")


def test_clones_are_isolated_from_program():
    prog = parse_program(
        "@protect\nfunc root:\n    call f\n    ret\nendfunc\n"
        "func f:\n    inc r0\n    ret\nendfunc\n"
    )
    unit = build_call_tree(prog, "root")
    assert unit.functions["f"] is not prog.functions["f"]
    unit.functions["f"].blocks[0].instrs.clear()
    assert prog.functions["f"].blocks[0].instrs


def test_straight_line_profile_order():
    text = (
        ".data g, 8\n@protect\nfunc f:\n    leag r1, g\n    add r2, r3\n"
        "    load r4, [r1]\n    store [r1], r4\n    ret\nendfunc\n"
    )
    unit = build_call_tree(parse_program(text), "f")
    (p,) = profile(unit)
    assert p.class_seq == (CLASS1, PTRADJUST, CLASS1, LOAD, STORE)
    assert p.weight == 1.0


def test_loop_weight_factor():
    text = (
        "@protect\nfunc f:\n    movi r1, 4\nloop:\n    inc r2\n    cmpi r1, 0\n"
        "    jnz loop\n    ret\nendfunc\n"
    )
    unit = build_call_tree(parse_program(text), "f")
    profs = {p.key[1]: p for p in profile(unit, loop_weight=8)}
    assert profs["loop"].weight == 8.0
    assert profs[unit.functions["f"].blocks[0].label].weight == 1.0
    profs = {p.key[1]: p for p in profile(unit, loop_weight=3)}
    assert profs["loop"].weight == 3.0


def test_nested_loop_weights_multiply():
    depths = loop_depths(sample_unit("matmul").functions["matmul"])
    labels = [bb.label for bb in sample_unit("matmul").functions["matmul"].blocks]
    by_label = dict(zip(labels, depths))
    assert by_label["iloop"] == 1
    assert by_label["jloop"] == 2
    assert by_label["kloop"] == 3
    profs = {p.key[1]: p.weight for p in profile(sample_unit("matmul"))}
    assert profs["kloop"] == 512.0


def test_child_function_weight_doubles():
    unit = sample_unit("tablelookup")
    profs = {p.key: p.weight for p in profile(unit)}
    # lookup body sits one call level down and inside no loop of its own.
    lookup_label = unit.functions["lookup"].blocks[0].label
    assert profs[("lookup", lookup_label)] == 2.0


def test_ptradjust_follows_address_forming_tag():
    unit = sample_unit("tablelookup")
    for p in profile(unit):
        seq = p.class_seq
        for i, t in enumerate(seq):
            if t == PTRADJUST:
                assert seq[i - 1] == CLASS1


def test_weights_invariant_under_block_reordering():
    base = (
        "@protect\nfunc f:\n    jmp one\n"
        "one:\n    inc r1\n    cmpi r1, 9\n    jnz one\n    jmp two\n"
        "two:\n    inc r2\n    cmpi r2, 9\n    jnz two\n    ret\nendfunc\n"
    )
    swapped = (
        "@protect\nfunc f:\n    jmp one\n"
        "two:\n    inc r2\n    cmpi r2, 9\n    jnz two\n    ret\n"
        "one:\n    inc r1\n    cmpi r1, 9\n    jnz one\n    jmp two\nendfunc\n"
    )
    w1 = {p.key[1]: p.weight for p in profile(build_call_tree(parse_program(base), "f"))}
    w2 = {p.key[1]: p.weight for p in profile(build_call_tree(parse_program(swapped), "f"))}
    assert w1["one"] == w2["one"] and w1["two"] == w2["two"]


def test_profile_length_formula():
    # Length = straight-line instructions + inserted ptradjusts + terminator
    # plumbing (call: 3 items, shadow-stack ret: 2 items).
    unit = sample_unit("tablelookup")
    lower_unit(unit)
    for name, func in unit.functions.items():
        static_root = name == unit.root and not unit.root_called_internally
        for bb, lowered in zip(func.blocks, unit.lowered[name]):
            n_pa = sum(1 for i in bb.instrs if i.op == "leag")
            plumbing = {"call": 3, "ret": 0 if static_root else 2}.get(bb.term.kind, 0)
            assert len(lowered.items) == len(bb.instrs) + n_pa + plumbing


def test_irreducible_flow_warns_and_keeps_weight_one():
    text = (
        "@protect\nfunc f:\n    jz b\na:\n    inc r1\n    jmp b\n"
        "b:\n    inc r2\n    jmp a\nendfunc\n"
    )
    # Both cycle blocks are entered from outside the cycle, so there is no
    # back edge to anchor a natural loop.
    prog = parse_program(text)
    unit = build_call_tree(prog, "f")
    with pytest.warns(UserWarning, match="irreducible"):
        profs = profile(unit)
    assert all(p.weight == 1.0 for p in profs)


def test_bad_loop_weight_rejected():
    with pytest.raises(ValueError):
        profile(sample_unit("modexp"), loop_weight=0.5)
