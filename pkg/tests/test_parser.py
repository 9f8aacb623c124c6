import pytest
from hypothesis import given, settings, strategies as st

from veilvm.isa import CLASS1, CLASS2, MASK64
from veilvm.parser import ParseError, UnresolvedLabel, parse_program, print_program
from veilvm.interp import interpret
from veilvm.samples import SAMPLES, sample_source


def wrap(body, data=""):
    return f"{data}\nfunc f:\n{body}\n    ret\nendfunc\n"


def test_single_add_line():
    prog = parse_program(wrap("    add r1, r2"))
    ins = prog.functions["f"].blocks[0].instrs[0]
    assert ins.op == "add"
    assert ins.iclass == CLASS1
    from veilvm.isa import encoded_length

    assert encoded_length(ins) == 3


def test_div_is_class2():
    prog = parse_program(wrap("    div r3"))
    assert prog.functions["f"].blocks[0].instrs[0].iclass == CLASS2


def test_jump_to_missing_label_rejected():
    with pytest.raises(UnresolvedLabel):
        parse_program(wrap("    jmp nowhere"))


def test_syntax_error_carries_line_number():
    text = "func f:\n    add r1, r2\n    frobnicate r1\n    ret\nendfunc\n"
    with pytest.raises(ParseError) as err:
        parse_program(text)
    assert err.value.line_no == 3


def test_register_out_of_range():
    with pytest.raises(ParseError):
        parse_program(wrap("    add r12, r0"))


@pytest.mark.parametrize("value", [
    0x123456789, -5, 0xFFFFFFFF00000001, 0xDEADBEEFCAFEBABE, 1 << 63, (1 << 64) - 1, 0x80000000,
])
def test_wide_movi_presplit_preserves_value(value):
    prog = parse_program(wrap(f"    movi r1, {value}"))
    state = interpret(prog)
    assert state.regs[1] == value & MASK64


def test_small_movi_not_split():
    prog = parse_program(wrap("    movi r1, 42"))
    assert len(prog.functions["f"].blocks[0].instrs) == 1


def test_oversized_addi_not_presplittable():
    with pytest.raises(ParseError):
        parse_program(wrap("    addi r1, 0x123456789"))


def test_duplicate_data_rejected():
    with pytest.raises(ParseError):
        parse_program(wrap("    add r1, r2", ".data g, 8\n.data g, 8"))


def test_unknown_global_rejected():
    with pytest.raises(ParseError):
        parse_program(wrap("    leag r1, nope"))


def test_protect_and_outputs():
    text = ".data g, 16\n.out r0, r5\n@protect\nfunc f:\n    leag r1, g\n    ret\nendfunc\n"
    prog = parse_program(text)
    assert prog.functions["f"].protect
    assert prog.outputs == (0, 5)
    assert prog.datas[0].size == 16


def test_cond_at_end_of_function_rejected():
    with pytest.raises(ParseError):
        parse_program("func f:\nl:\n    jz l\nendfunc\n")


def test_call_records_fallthrough():
    text = "func f:\n    call g\n    ret\nendfunc\nfunc g:\n    ret\nendfunc\n"
    prog = parse_program(text)
    bb = prog.functions["f"].blocks[0]
    assert bb.term.kind == "call"
    assert bb.term.target == "g"
    assert bb.term.fallthrough == prog.functions["f"].blocks[1].label


def test_label_alias_resolution():
    text = "func f:\n    jmp b\na:\nb:\n    ret\nendfunc\n"
    prog = parse_program(text)
    assert prog.functions["f"].blocks[1].label == "a"
    assert prog.functions["f"].blocks[0].term.target == "a"


def test_samples_round_trip():
    for name in SAMPLES:
        prog = parse_program(sample_source(name))
        assert parse_program(print_program(prog)) == prog


_simple_instr = st.sampled_from([
    "mov r1, r2", "add r3, r4", "movi r5, 7", "shl r2, 3", "imul r1, r1",
    "xor r0, r6", "inc r7", "cmp r1, r2", "lea r4, [r5+16]",
])


@st.composite
def _programs(draw):
    n_blocks = draw(st.integers(1, 4))
    lines = ["func f:"]
    for i in range(n_blocks):
        lines.append(f"b{i}:")
        for ins in draw(st.lists(_simple_instr, min_size=1, max_size=3)):
            lines.append(f"    {ins}")
        if i == n_blocks - 1:
            lines.append("    ret")
        else:
            target = draw(st.integers(0, n_blocks - 1))
            if draw(st.booleans()):
                lines.append(f"    jmp b{i + 1}")
            else:
                lines.append(f"    jz b{target}")
    lines.append("endfunc")
    return "\n".join(lines) + "\n"


@given(_programs())
@settings(max_examples=60, deadline=None)
def test_round_trip_property(text):
    prog = parse_program(text)
    assert parse_program(print_program(prog)) == prog
