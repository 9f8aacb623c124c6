"""Line-oriented assembly front end.

Grammar (one item per line, ``#`` or ``;`` start a comment):

    .data NAME, SIZE[, b0 b1 b2 ...]   global byte buffer with optional init
    .out rX [, rY ...]                 registers in the program's output contract
    .entry NAME                        entry function (default: first function)
    @protect                           marks the next function for obfuscation
    func NAME:
        LABEL:
        MNEMONIC OPERANDS
    endfunc

Operands use ``rN`` registers, decimal or ``0x`` immediates, ``[rN+disp]``
memory references and bare names for labels, functions and globals. Global
buffers are addressed by materializing their address with ``leag`` first;
memory operands are register-based only. ``movi`` immediates wider than 32
bits are pre-split into an equivalent movi/shl/ori sequence so every
instruction fits a 7-byte slot.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .isa import (
    CONDJUMPS,
    Instruction,
    OPCODES,
    REG_COUNT,
    SHAPE_L,
    SHAPE_MR,
    SHAPE_NONE,
    SHAPE_R,
    SHAPE_RG,
    SHAPE_RI,
    SHAPE_RM,
    SHAPE_RR,
    SHAPE_RRI,
    SHAPE_W,
    TERMINATOR_OPS,
)


class ParseError(Exception):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no
        self.msg = msg


class UnresolvedLabel(ParseError):
    pass


@dataclass(frozen=True)
class Terminator:
    """Basic block exit: kind is jmp/cond/call/ret.

    ``target`` is a label (jmp/cond) or function name (call); ``fallthrough``
    is the label reached when a conditional is not taken or a call returns.
    """

    kind: str
    cc: str | None = None
    target: str | None = None
    fallthrough: str | None = None


@dataclass
class BasicBlock:
    label: str
    instrs: list[Instruction]
    term: Terminator

    def __eq__(self, other):
        return (
            isinstance(other, BasicBlock)
            and self.label == other.label
            and self.instrs == other.instrs
            and self.term == other.term
        )


@dataclass
class Function:
    name: str
    protect: bool
    blocks: list[BasicBlock]

    def block_index(self) -> dict[str, int]:
        return {bb.label: i for i, bb in enumerate(self.blocks)}

    def __eq__(self, other):
        return (
            isinstance(other, Function)
            and self.name == other.name
            and self.protect == other.protect
            and self.blocks == other.blocks
        )


@dataclass(frozen=True)
class DataDecl:
    name: str
    size: int
    init: bytes = b""


@dataclass
class Program:
    functions: dict[str, Function] = field(default_factory=dict)
    datas: list[DataDecl] = field(default_factory=list)
    entry: str = ""
    outputs: tuple[int, ...] = ()

    def data_names(self) -> set[str]:
        return {d.name for d in self.datas}

    def __eq__(self, other):
        return (
            isinstance(other, Program)
            and self.functions == other.functions
            and self.datas == other.datas
            and self.entry == other.entry
            and self.outputs == other.outputs
        )


_REG_RE = re.compile(r"^r(\d+)$")
_MEM_RE = re.compile(r"^\[\s*(r\d+)\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+)\s*)?\]$")
_LABEL_RE = re.compile(r"^([.A-Za-z_][.\w]*):$")
_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")

IMM32_MIN, IMM32_MAX = -(1 << 31), (1 << 31) - 1
MASK64 = (1 << 64) - 1


def _parse_reg(tok: str, line_no: int) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise ParseError(line_no, f"expected register, got {tok!r}")
    n = int(m.group(1))
    if n >= REG_COUNT:
        raise ParseError(line_no, f"register {tok} out of range (r0..r{REG_COUNT - 1})")
    return n


def _parse_imm(tok: str, line_no: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(line_no, f"bad immediate {tok!r}") from None


def _parse_mem(tok: str, line_no: int) -> tuple[int, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise ParseError(line_no, f"bad memory operand {tok!r}")
    base = _parse_reg(m.group(1), line_no)
    disp = 0
    if m.group(3) is not None:
        disp = int(m.group(3), 0)
        if m.group(2) == "-":
            disp = -disp
    if not IMM32_MIN <= disp <= IMM32_MAX:
        raise ParseError(line_no, f"displacement {disp} exceeds 32 bits")
    return base, disp


def _split_operands(rest: str, line_no: int) -> list[str]:
    # Split on commas outside brackets.
    parts, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    if depth != 0:
        raise ParseError(line_no, "unbalanced brackets")
    return parts


def _split_movi(rd: int, imm: int) -> list[Instruction]:
    # 64-bit constant with a small low word: movi-high / shl 32 / ori-low.
    unsigned = imm & MASK64
    hi, lo = unsigned >> 32, unsigned & 0xFFFFFFFF
    hi_signed = hi - (1 << 32) if hi >= (1 << 31) else hi
    seq = [Instruction("movi", (rd, hi_signed)), Instruction("shl", (rd, 32))]
    if lo:
        seq.append(Instruction("ori", (rd, lo)))
    return seq


def parse_instruction(mnemonic: str, rest: str, line_no: int, data_names: set[str]) -> list[Instruction]:
    """Parse one instruction line; may expand to a pre-split sequence."""
    op = OPCODES.get(mnemonic)
    if op is None or op.pseudo:
        raise ParseError(line_no, f"unknown opcode {mnemonic!r}")
    ops = _split_operands(rest, line_no) if rest else []

    def need(n):
        if len(ops) != n:
            raise ParseError(line_no, f"{mnemonic} expects {n} operand(s), got {len(ops)}")

    if op.shape == SHAPE_RR:
        need(2)
        return [Instruction(mnemonic, (_parse_reg(ops[0], line_no), _parse_reg(ops[1], line_no)))]
    if op.shape == SHAPE_RI:
        need(2)
        rd = _parse_reg(ops[0], line_no)
        imm = _parse_imm(ops[1], line_no)
        if mnemonic in ("shl", "shr"):
            if not 0 <= imm <= 63:
                raise ParseError(line_no, f"shift count {imm} out of range 0..63")
            return [Instruction(mnemonic, (rd, imm))]
        if IMM32_MIN <= imm <= IMM32_MAX:
            return [Instruction(mnemonic, (rd, imm))]
        if mnemonic == "movi":
            if not -(1 << 63) <= imm < (1 << 64):
                raise ParseError(line_no, f"immediate {imm} exceeds 64 bits")
            lo = imm & 0xFFFFFFFF
            if lo > IMM32_MAX:  # ori immediate is sign-extended; split the low word
                seq = _split_movi_wide(rd, imm)
            else:
                seq = _split_movi(rd, imm)
            return seq
        raise ParseError(line_no, f"immediate {imm} exceeds 32 bits and {mnemonic} is not pre-splittable")
    if op.shape == SHAPE_R:
        need(1)
        return [Instruction(mnemonic, (_parse_reg(ops[0], line_no),))]
    if op.shape in (SHAPE_RM, SHAPE_RRI):
        need(2)
        rd = _parse_reg(ops[0], line_no)
        base, disp = _parse_mem(ops[1], line_no)
        return [Instruction(mnemonic, (rd, base, disp))]
    if op.shape == SHAPE_MR:
        need(2)
        base, disp = _parse_mem(ops[0], line_no)
        rs = _parse_reg(ops[1], line_no)
        return [Instruction(mnemonic, (base, disp, rs))]
    if op.shape == SHAPE_RG:
        need(2)
        rd = _parse_reg(ops[0], line_no)
        name = ops[1]
        if not _NAME_RE.match(name):
            raise ParseError(line_no, f"bad global name {name!r}")
        if name not in data_names:
            raise ParseError(line_no, f"unknown global {name!r}")
        return [Instruction(mnemonic, (rd, name))]
    if op.shape == SHAPE_L:
        need(1)
        return [Instruction(mnemonic, (ops[0],))]
    if op.shape == SHAPE_W:
        need(1)
        return [Instruction(mnemonic, (_parse_imm(ops[0], line_no),))]
    if op.shape == SHAPE_NONE:
        need(0)
        return [Instruction(mnemonic)]
    raise AssertionError(op.shape)


def _split_movi_wide(rd: int, imm: int) -> list[Instruction]:
    # Low 32-bit word has its top bit set: build the low word in two ori
    # steps of at most 31 bits so immediates stay within signed 32 bits.
    unsigned = imm & MASK64
    hi, lo = unsigned >> 32, unsigned & 0xFFFFFFFF
    hi_signed = hi - (1 << 32) if hi >= (1 << 31) else hi
    return [
        Instruction("movi", (rd, hi_signed)),
        Instruction("shl", (rd, 16)),
        Instruction("ori", (rd, lo >> 16)),
        Instruction("shl", (rd, 16)),
        Instruction("ori", (rd, lo & 0xFFFF)),
    ]


def parse_program(text: str) -> Program:
    """Parse assembly text into a validated :class:`Program`.

    Raises :class:`ParseError` (with a line number) for syntax problems and
    :class:`UnresolvedLabel` when a jump references a missing label. Call
    targets may name functions declared elsewhere in the file; targets
    outside the program are only rejected by the call-tree builder.
    """
    prog = Program()
    lines = text.splitlines()
    pending_protect = False
    cur_func: str | None = None
    # Per function: list of (label or None, mnemonic, rest, line_no).
    raw: dict[str, list] = {}
    func_protect: dict[str, bool] = {}
    func_order: list[str] = []
    entry: str | None = None

    for idx, rawline in enumerate(lines, start=1):
        line = rawline.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".data"):
            rest = line[len(".data"):].strip()
            parts = _split_operands(rest, idx)
            if len(parts) < 2:
                raise ParseError(idx, ".data needs NAME, SIZE")
            name = parts[0]
            if not _NAME_RE.match(name):
                raise ParseError(idx, f"bad data name {name!r}")
            if any(d.name == name for d in prog.datas):
                raise ParseError(idx, f"duplicate data {name!r}")
            size = _parse_imm(parts[1], idx)
            if size <= 0:
                raise ParseError(idx, "data size must be positive")
            init = b""
            if len(parts) == 3:
                init = bytes(_parse_imm(t, idx) & 0xFF for t in parts[2].split())
                if len(init) > size:
                    raise ParseError(idx, "init bytes exceed declared size")
            elif len(parts) > 3:
                raise ParseError(idx, ".data takes at most 3 fields")
            prog.datas.append(DataDecl(name, size, init))
            continue
        if line.startswith(".out"):
            regs = _split_operands(line[len(".out"):].strip(), idx)
            prog.outputs = tuple(_parse_reg(r, idx) for r in regs)
            continue
        if line.startswith(".entry"):
            entry = line[len(".entry"):].strip()
            continue
        if line == "@protect":
            pending_protect = True
            continue
        m = re.match(r"^func\s+([A-Za-z_]\w*):$", line)
        if m:
            if cur_func is not None:
                raise ParseError(idx, "nested func")
            cur_func = m.group(1)
            if cur_func in raw:
                raise ParseError(idx, f"duplicate function {cur_func!r}")
            raw[cur_func] = []
            func_order.append(cur_func)
            func_protect[cur_func] = pending_protect
            pending_protect = False
            continue
        if line == "endfunc":
            if cur_func is None:
                raise ParseError(idx, "endfunc outside func")
            cur_func = None
            continue
        if cur_func is None:
            raise ParseError(idx, f"statement outside function: {line!r}")
        lm = _LABEL_RE.match(line)
        if lm:
            raw[cur_func].append(("label", lm.group(1), idx))
            continue
        parts = line.split(None, 1)
        raw[cur_func].append(("ins", parts[0], parts[1] if len(parts) > 1 else "", idx))

    if cur_func is not None:
        raise ParseError(len(lines), f"missing endfunc for {cur_func!r}")
    if not raw:
        raise ParseError(len(lines) or 1, "program has no functions")

    data_names = prog.data_names()
    for fname in func_order:
        prog.functions[fname] = _build_function(
            fname, func_protect[fname], raw[fname], data_names, set(func_order)
        )

    prog.entry = entry or func_order[0]
    if prog.entry not in prog.functions:
        raise ParseError(1, f"entry function {prog.entry!r} not defined")
    return prog


def _build_function(fname, protect, items, data_names, func_names) -> Function:
    # First pass: flatten to (label?, instruction) stream with line numbers.
    stream: list[tuple[str | None, Instruction, int]] = []
    pending_labels: list[str] = []
    seen_labels: set[str] = set()
    for item in items:
        if item[0] == "label":
            _, label, line_no = item
            if label in seen_labels:
                raise ParseError(line_no, f"duplicate label {label!r}")
            seen_labels.add(label)
            pending_labels.append(label)
            continue
        _, mnem, rest, line_no = item
        for k, ins in enumerate(parse_instruction(mnem, rest, line_no, data_names)):
            label = pending_labels if k == 0 else []
            stream.append((tuple(label), ins, line_no))
            if k == 0:
                pending_labels = []
    if pending_labels:
        raise ParseError(items[-1][-1], f"label {pending_labels[0]!r} at end of function")
    if not stream:
        raise ParseError(items[0][-1] if items else 1, f"empty function {fname!r}")

    # Second pass: split into basic blocks at labels and after terminators.
    blocks: list[BasicBlock] = []
    cur_label: str | None = None
    cur: list[Instruction] = []
    auto = 0
    label_alias: dict[str, str] = {}

    def fresh_label():
        nonlocal auto
        lbl = f".L{auto}"
        auto += 1
        return lbl

    def close(term: Terminator):
        nonlocal cur, cur_label
        label = cur_label if cur_label is not None else fresh_label()
        blocks.append(BasicBlock(label, cur, term))
        cur = []
        cur_label = None

    pending_line = stream[0][2]
    i = 0
    while i < len(stream):
        labels, ins, line_no = stream[i]
        if labels:
            primary = labels[0]
            if cur or cur_label is not None:
                # Implicit fallthrough into a labeled block.
                close(Terminator("jmp", target=primary))
            cur_label = primary
            for alias in labels[1:]:
                label_alias[alias] = primary
        if ins.op in TERMINATOR_OPS:
            nxt = _peek_label(stream, i + 1)
            if ins.op == "jmp":
                close(Terminator("jmp", target=ins.args[0]))
            elif ins.op == "ret":
                close(Terminator("ret"))
            elif ins.op == "call":
                if ins.args[0] not in func_names and ins.args[0] != fname:
                    # Calls may target functions declared anywhere in the
                    # file; truly external names survive parsing and are
                    # rejected later by the call-tree builder.
                    pass
                if nxt is None:
                    raise ParseError(line_no, "call needs a following block to return to")
                close(Terminator("call", target=ins.args[0], fallthrough=nxt))
            else:
                if nxt is None:
                    raise ParseError(line_no, f"{ins.op} needs a fallthrough block")
                close(Terminator("cond", cc=ins.op, target=ins.args[0], fallthrough=nxt))
        else:
            cur.append(ins)
        pending_line = line_no
        i += 1
    if cur or cur_label is not None:
        raise ParseError(pending_line, f"function {fname!r} must end with jmp or ret")

    # Ensure fallthrough targets exist as labels; auto-label the successor
    # block when a terminator needs one.
    by_label = {}
    for k, bb in enumerate(blocks):
        by_label[bb.label] = k
    fixed = []
    for k, bb in enumerate(blocks):
        term = bb.term
        if term.kind in ("cond", "call") and term.fallthrough == "__next__":
            term = Terminator(term.kind, term.cc, term.target, blocks[k + 1].label)
        fixed.append(BasicBlock(bb.label, bb.instrs, term))
    blocks = fixed

    # Resolve label aliases and validate the label graph.
    def resolve(lbl):
        return label_alias.get(lbl, lbl)

    out_blocks = []
    for bb in blocks:
        term = bb.term
        if term.kind in ("jmp", "cond"):
            tgt = resolve(term.target)
            if tgt not in by_label:
                raise UnresolvedLabel(0, f"function {fname!r}: jump to missing label {term.target!r}")
            term = Terminator(term.kind, term.cc, tgt, resolve(term.fallthrough) if term.fallthrough else None)
        if term.kind in ("cond", "call") and term.fallthrough is not None:
            ft = resolve(term.fallthrough)
            if ft not in by_label:
                raise UnresolvedLabel(0, f"function {fname!r}: missing fallthrough {ft!r}")
            term = Terminator(term.kind, term.cc, term.target, ft)
        out_blocks.append(BasicBlock(bb.label, bb.instrs, term))
    return Function(fname, protect, out_blocks)


def _peek_label(stream, i):
    """Label of the block the next stream position begins, if any."""
    if i >= len(stream):
        return None
    labels, _, _ = stream[i]
    return labels[0] if labels else "__next__"


def print_program(prog: Program) -> str:
    """Render a program back to parseable text (round-trip stable)."""
    out = []
    for d in prog.datas:
        if d.init:
            out.append(f".data {d.name}, {d.size}, " + " ".join(str(b) for b in d.init))
        else:
            out.append(f".data {d.name}, {d.size}")
    if prog.outputs:
        out.append(".out " + ", ".join(f"r{r}" for r in prog.outputs))
    out.append(f".entry {prog.entry}")
    for fn in prog.functions.values():
        if fn.protect:
            out.append("@protect")
        out.append(f"func {fn.name}:")
        for bb in fn.blocks:
            out.append(f"{bb.label}:")
            for ins in bb.instrs:
                out.append(f"    {ins}")
            t = bb.term
            if t.kind == "jmp":
                out.append(f"    jmp {t.target}")
            elif t.kind == "cond":
                out.append(f"    {t.cc} {t.target}")
            elif t.kind == "call":
                out.append(f"    call {t.target}")
            elif t.kind == "ret":
                out.append("    ret")
        out.append("endfunc")
    return "\n".join(out) + "\n"
