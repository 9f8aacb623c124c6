import pytest

from veilvm.interp import DataLayout, MachineState, build_layout, execute_instruction
from veilvm.isa import CLASS1, CLASS2, CTMP, Instruction, LOAD, PTRADJUST, STORE
from veilvm.parser import parse_program
from veilvm.patterngen import BlockPattern
from veilvm.profiler import build_call_tree
from veilvm.rewriter import (
    BLOCK_CELLS,
    CELL_BYTES,
    HALT_ID,
    InstructionDoesNotFitPattern,
    ReservedRegisterUse,
    RewriteError,
    VARIANT_I,
    VARIANT_II,
    VARIANT_III,
    VARIANT_IV,
    VARIANT_V,
    dummy_for,
    format_listing,
    layout_variant_i,
    structural_scan,
    translate,
)

from conftest import compiled, sample_pattern, sample_unit


def unit_for(text, root="f"):
    return build_call_tree(parse_program(text), root)


def test_dummy_class1_is_inert_identity():
    (ins,) = dummy_for(CLASS1)
    assert ins.op == "lea" and ins.args[2] == 0 and ins.args[0] == ins.args[1]
    state = MachineState(build_layout(parse_program("func f:\n    ret\nendfunc\n")))
    state.fz = True
    before = (list(state.regs), state.flags())
    execute_instruction(state, ins)
    assert (list(state.regs), state.flags()) == before


def test_dummy_class2_spans_two_slots_and_keeps_flags():
    cells = dummy_for(CLASS2)
    assert len(cells) == 2
    assert cells[0].op == "fsave" and cells[1].op == "ddiv"
    state = MachineState(build_layout(parse_program("func f:\n    ret\nendfunc\n")))
    state.fz, state.fs, state.fc = True, False, True
    for ins in cells:
        execute_instruction(state, ins)
    assert state.flags() == (True, False, True)


def test_dummy_memory_accesses_target_dummy_address():
    for cls in (LOAD, STORE):
        cells = dummy_for(cls, dummy_addr=0x1000)
        assert len(cells) == 3
        assert cells[0].op == "movi" and cells[0].args[1] == 0x1000
        assert cells[1].op in ("dload", "dstore")
        assert cells[2].args[0] != CTMP  # never clobbers the live scratch register


def test_dummy_ptradjust_uses_scratch():
    (ins,) = dummy_for(PTRADJUST)
    assert ins.op == "ptradjust" and ins.args[0] >= 100


def test_variant_pattern_contract():
    unit = sample_unit("modexp")
    with pytest.raises(RewriteError):
        translate(unit, None, VARIANT_IV)
    with pytest.raises(RewriteError):
        translate(unit, sample_pattern("modexp"), VARIANT_I)
    with pytest.raises(RewriteError):
        translate(unit, None, "VI-Bogus")


def test_reserved_register_use_rejected():
    unit = unit_for("@protect\nfunc f:\n    inc r1\n    ret\nendfunc\n")
    unit.functions["f"].blocks[0].instrs[0] = Instruction("inc", (CTMP,))
    with pytest.raises(ReservedRegisterUse):
        translate(unit, None, VARIANT_I)


def test_pattern_missing_class_rejected():
    unit = sample_unit("modexp")  # contains div
    pattern = BlockPattern((CLASS1, CLASS1, STORE), 9)
    with pytest.raises(InstructionDoesNotFitPattern):
        translate(unit, pattern, VARIANT_IV)


@pytest.mark.parametrize("variant", [VARIANT_III, VARIANT_IV, VARIANT_V])
def test_uniform_class_signature(variant):
    for name in ("modexp", "matmul", "tablelookup"):
        tr = compiled(name, variant)
        sigs = {b.class_signature() for b in tr.blocks}
        assert len(sigs) == 1
        assert not structural_scan(tr)


def test_alignment_by_variant():
    tr4 = compiled("modexp", VARIANT_IV)
    for b in tr4.blocks:
        for key, offset, is_fill in b.retires():
            if not is_fill:
                assert offset % CELL_BYTES == 0
    tr3 = compiled("modexp", VARIANT_III)
    unaligned = [
        offset
        for b in tr3.blocks
        for key, offset, is_fill in b.retires()
        if not is_fill and offset % CELL_BYTES
    ]
    assert unaligned  # packed payloads end flush with their cells


def test_fixed_count_retires_uniform_under_ii():
    tr = compiled("modexp", VARIANT_II)
    assert {len(b.retires()) for b in tr.blocks} == {2 * BLOCK_CELLS}


def test_variant_i_counts_vary():
    # Greedy padding keeps bare no-ops, so payload-light blocks retire less.
    five = unit_for("@protect\nfunc f:\n    inc r1\n    inc r2\n    inc r3\n    inc r4\n    inc r5\n    ret\nendfunc\n")
    six = unit_for("@protect\nfunc f:\n    inc r1\n    inc r2\n    inc r3\n    inc r4\n    inc r5\n    inc r6\n    ret\nendfunc\n")
    t5 = layout_variant_i(five)
    t6 = layout_variant_i(six)
    assert len(t5.blocks) == len(t6.blocks) == 1
    assert len(t6.blocks[0].retires()) == len(t5.blocks[0].retires()) + 1


def test_variant_i_exact_fill_and_split():
    exact = unit_for("@protect\nfunc f:\n" + "    inc r1\n" * 10 + "    ret\nendfunc\n")
    t = layout_variant_i(exact)
    assert len(t.blocks) == 1
    assert all(c.payload is not None for c in t.blocks[0].cells)
    over = unit_for("@protect\nfunc f:\n" + "    inc r1\n" * 11 + "    ret\nendfunc\n")
    assert len(layout_variant_i(over).blocks) == 2


def test_ptradjust_cell_follows_leag():
    tr = compiled("modexp", VARIANT_IV)
    for b in tr.blocks:
        ops = [c.payload.op for c in b.cells if c.payload is not None]
        for i, op in enumerate(ops):
            if op == "leag":
                assert ops[i + 1] == "ptradjust"


def test_empty_block_becomes_all_dummies():
    unit = unit_for("@protect\nfunc f:\nstart:\n    jmp done\ndone:\n    inc r1\n    ret\nendfunc\n")
    tr = translate(unit, BlockPattern((CLASS1, LOAD), 8), VARIANT_IV)
    first = tr.blocks[tr.first_block[("f", "start")]]
    body_cells = [c for c in first.cells if c.unit_class != "suffix"]
    assert all(c.dummy for c in body_cells)
    assert len(first.cells) == 8


def test_suffix_recipes():
    tr = compiled("modexp", VARIANT_IV)
    by_origin = {}
    for b in tr.blocks:
        by_origin.setdefault(b.origin[1], b)
    cond = by_origin["bitloop"].cells[-4:]
    assert cond[2].payload.op == "cmovz"
    assert cond[3].payload.op == "cjump"
    epilogue = by_origin[".L1"].cells[-4:]
    assert epilogue[0].payload.args[1] == HALT_ID  # uncalled root returns halt


def test_ret_pop_suffix_reads_ctmp():
    tr = compiled("tablelookup", VARIANT_IV)
    lookup_ret = [b for b in tr.blocks if b.origin[0] == "lookup"][-1]
    suffix = lookup_ret.cells[-4:]
    assert suffix[0].payload.op == "mov" and suffix[0].payload.args[1] == CTMP


def test_translation_is_deterministic():
    unit = sample_unit("modexp")
    pat = sample_pattern("modexp")
    a = translate(unit, pat, VARIANT_V, seed=7)
    b = translate(unit, pat, VARIANT_V, seed=7)
    assert [blk.image() for blk in a.blocks] == [blk.image() for blk in b.blocks]


def test_repeated_translation_does_not_corrupt_earlier_results():
    unit = sample_unit("tablelookup")
    pat = sample_pattern("tablelookup")
    first = translate(unit, pat, VARIANT_IV, seed=0)
    images = [b.image() for b in first.blocks]
    translate(unit, None, VARIANT_I, seed=0)  # different block numbering
    assert [b.image() for b in first.blocks] == images


GOLDEN = """\
block 0 (f..L0#0)
  0: class1 movi r1, 7 fill=1
  1: class1 inc r1 fill=5
  2: store lea caddr, [r2+0] fill=4
  3: store dstore fill=6
  4: store sstore r1 fill=3
  5: suffix movi cnext, 2147483647 fill=1
  6: suffix movi ctmp2, 2147483647 fill=1
  7: suffix mov cnext, ctmp2 fill=5
  8: suffix cjump fill=3
"""


def test_listing_golden():
    unit = unit_for("@protect\nfunc f:\n    movi r1, 7\n    inc r1\n    store [r2], r1\n    ret\nendfunc\n")
    tr = translate(unit, BlockPattern((CLASS1, CLASS1, STORE), 9), VARIANT_IV, seed=0)
    assert format_listing(tr) == GOLDEN
