"""Virtual instruction set: opcodes, latency classes, and the encoding-size model.

The ISA is a small x86-64-flavored register machine with 12 general 64-bit
registers (r0..r11), zero/sign/carry flags, and a flat byte-addressable
memory. Encoded lengths come from a fixed per-opcode table (plus a
displacement-width rule for memory operands and parameterized no-op fill),
not from a real encoder: the block layout machinery only needs lengths and
latency classes, never real bytes.

Latency classes group opcodes that a single-stepping observer cannot tell
apart. The distribution parameters attached to each class are a synthetic
model of interrupt-driven measurements (context-switch dominated, with a
heavy secondary peak); they are consumed exclusively by the attacker
simulator and are configurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Latency / slot classes.
CLASS1 = "class1"          # standard ALU: add, mul, shifts, lea, (conditional) moves
CLASS2 = "class2"          # division only
LOAD = "load"
STORE = "store"
PTRADJUST = "ptradjust"    # scratchpad-relative pointer fixup
EXIT = "exit"              # block exit jump into the code controller

INSTRUCTION_CLASSES = (CLASS1, CLASS2, LOAD, STORE, PTRADJUST)

# Operand shapes.
SHAPE_RR = "rr"            # reg, reg
SHAPE_RI = "ri"            # reg, imm
SHAPE_R = "r"              # reg
SHAPE_RM = "rm"            # reg, [reg+disp]
SHAPE_MR = "mr"            # [reg+disp], reg
SHAPE_RRI = "rri"          # reg, [reg+disp]  (address computation, no access)
SHAPE_RG = "rg"            # reg, global-name
SHAPE_L = "l"              # label / function name
SHAPE_NONE = "none"
SHAPE_W = "w"              # fill width

# Application registers.
REG_COUNT = 12

# Reserved controller registers, disjoint from the application register file.
# caddr/cret/cwf are the data-controller handshake (address, return offset,
# write flag); cnext carries the selected next-block id; ctmp/ctmp2 are
# controller scratch (dummy payloads, div flag scaffolding); csp is the
# shadow return stack pointer.
CADDR, CRET, CWF, CNEXT, CTMP, CTMP2, CSP = 100, 101, 102, 103, 104, 105, 106
RESERVED_REGS = {
    "caddr": CADDR,
    "cret": CRET,
    "cwf": CWF,
    "cnext": CNEXT,
    "ctmp": CTMP,
    "ctmp2": CTMP2,
    "csp": CSP,
}
RESERVED_NAMES = {v: k for k, v in RESERVED_REGS.items()}

MASK64 = (1 << 64) - 1
SIGN_BIT = 1 << 63


def reg_name(code: int) -> str:
    if code < REG_COUNT:
        return f"r{code}"
    return RESERVED_NAMES[code]


def is_reserved(code: int) -> bool:
    return code >= 100


@dataclass(frozen=True)
class Opcode:
    """One table entry: mnemonic, operand shape, semantics tag and class.

    ``enc`` is the fixed encoded length in bytes; opcodes whose length
    depends on operands (memory displacement width, no-op fill width) set
    ``enc`` to 0 and are special-cased in :func:`encoded_length`.
    """

    name: str
    shape: str
    tag: str
    iclass: str
    enc: int
    pseudo: bool = False   # emitted by the rewriter only, rejected by the parser
    writes_flags: bool = False


def _op(name, shape, tag, iclass, enc, pseudo=False, flags=False):
    return Opcode(name, shape, tag, iclass, enc, pseudo, flags)


# Application opcode table. Sizes mirror common x86-64 encodings: 3 bytes
# for REX+ALU reg/reg, 4 for 0F-escaped or imm8 forms, 7 for imm32/disp32
# forms. Anything that would not fit a 7-byte slot is pre-split by the
# parser, so every table entry satisfies the slot bound.
OPCODES: dict[str, Opcode] = {
    op.name: op
    for op in [
        _op("mov", SHAPE_RR, "move", CLASS1, 3),
        _op("movi", SHAPE_RI, "move", CLASS1, 7),
        _op("add", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("addi", SHAPE_RI, "arith", CLASS1, 0, flags=True),
        _op("sub", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("imul", SHAPE_RR, "mul", CLASS1, 4, flags=True),
        _op("and", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("or", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("xor", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("ori", SHAPE_RI, "arith", CLASS1, 0, flags=True),
        _op("shl", SHAPE_RI, "shift", CLASS1, 4, flags=True),
        _op("shr", SHAPE_RI, "shift", CLASS1, 4, flags=True),
        _op("shlr", SHAPE_RR, "shift", CLASS1, 4, flags=True),
        _op("shrr", SHAPE_RR, "shift", CLASS1, 4, flags=True),
        _op("inc", SHAPE_R, "arith", CLASS1, 3, flags=True),
        _op("cmp", SHAPE_RR, "arith", CLASS1, 3, flags=True),
        _op("cmpi", SHAPE_RI, "arith", CLASS1, 0, flags=True),
        _op("lea", SHAPE_RRI, "lea", CLASS1, 0),
        _op("leag", SHAPE_RG, "lea", CLASS1, 7),
        _op("cmovz", SHAPE_RR, "cmov", CLASS1, 4),
        _op("cmovnz", SHAPE_RR, "cmov", CLASS1, 4),
        _op("cmovs", SHAPE_RR, "cmov", CLASS1, 4),
        _op("div", SHAPE_R, "div", CLASS2, 3),
        _op("load", SHAPE_RM, "load", LOAD, 0),
        _op("store", SHAPE_MR, "store", STORE, 0),
        _op("jmp", SHAPE_L, "jump", CLASS1, 5),
        _op("jz", SHAPE_L, "condjump", CLASS1, 6),
        _op("jnz", SHAPE_L, "condjump", CLASS1, 6),
        _op("js", SHAPE_L, "condjump", CLASS1, 6),
        _op("call", SHAPE_L, "call", CLASS1, 5),
        _op("ret", SHAPE_NONE, "ret", CLASS1, 1),
        _op("ptradjust", SHAPE_R, "ptradjust", PTRADJUST, 4),
        _op("nopfill", SHAPE_W, "nopfill", CLASS1, 0),
    ]
}

# Internal opcodes used inside translated code blocks. They never appear in
# source programs and never enter the public ISA table.
PSEUDO_OPCODES: dict[str, Opcode] = {
    op.name: op
    for op in [
        _op("dload", SHAPE_NONE, "dfetch", LOAD, 2, pseudo=True),
        _op("dstore", SHAPE_NONE, "dfetch", STORE, 2, pseudo=True),
        _op("sload", SHAPE_R, "scratch", CLASS1, 5, pseudo=True),
        _op("sstore", SHAPE_R, "scratch", CLASS1, 5, pseudo=True),
        _op("fsave", SHAPE_NONE, "flags", CLASS1, 2, pseudo=True),
        # div with the saved flags restored afterwards; the fsave/divr pair
        # keeps application flags transparent across a division slot.
        _op("divr", SHAPE_R, "div", CLASS2, 3, pseudo=True, flags=False),
        _op("ddiv", SHAPE_NONE, "div", CLASS2, 3, pseudo=True),
        _op("cjump", SHAPE_NONE, "exit", EXIT, 5, pseudo=True),
    ]
}

ALL_OPCODES = {**OPCODES, **PSEUDO_OPCODES}

CONDJUMPS = {"jz": ("z", True), "jnz": ("z", False), "js": ("s", True)}
COND_TO_CMOV = {"jz": "cmovz", "jnz": "cmovnz", "js": "cmovs"}
TERMINATOR_OPS = {"jmp", "jz", "jnz", "js", "call", "ret"}

MAX_PAYLOAD_BYTES = 7
SLOT_BYTES = 8


class RetTarget:
    """Symbolic immediate holding a block id resolved late in translation."""

    __slots__ = ("key", "value")

    def __init__(self, key):
        self.key = key
        self.value = None

    def resolve(self) -> int:
        if self.value is None:
            raise ValueError(f"unresolved block target {self.key!r}")
        return self.value

    def __repr__(self):
        return f"RetTarget({self.key!r}->{self.value})"

    def __eq__(self, other):
        return isinstance(other, RetTarget) and self.key == other.key and self.value == other.value

    def __hash__(self):
        return hash((self.key, self.value))


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction: opcode name plus an operand tuple.

    Operand layout by shape:
      rr         (rd, rs)
      ri         (rd, imm)
      r          (rd,)
      rm / rri   (rd, rbase, disp)
      mr         (rbase, disp, rsrc)
      rg         (rd, global_name)
      l          (label_or_function,)
      w          (width,)
    """

    op: str
    args: tuple = ()

    @property
    def opcode(self) -> Opcode:
        return ALL_OPCODES[self.op]

    @property
    def iclass(self) -> str:
        return self.opcode.iclass

    def __str__(self) -> str:
        return format_instruction(self)


def _disp_width(disp: int) -> int:
    return 4 if -128 <= disp <= 127 else 7


def _imm_width(imm: int) -> int:
    return 4 if -128 <= imm <= 127 else 7


def encoded_length(ins: Instruction) -> int:
    """Deterministic encoded size in bytes (1..8).

    Non-suffix payloads never exceed 7 bytes so every instruction fits one
    8-byte slot with at least one fill byte. ``nopfill`` is the fill itself
    and is parameterized over widths 1..8.
    """
    op = ins.opcode
    if op.enc:
        return op.enc
    name = ins.op
    if name == "nopfill":
        width = ins.args[0]
        if not 1 <= width <= SLOT_BYTES:
            raise ValueError(f"nopfill width {width} out of range 1..8")
        return width
    if name in ("load", "lea"):
        return _disp_width(ins.args[2])
    if name == "store":
        return _disp_width(ins.args[1])
    if name in ("addi", "ori", "cmpi"):
        return _imm_width(ins.args[1])
    raise AssertionError(f"no length rule for {name}")


def format_instruction(ins: Instruction) -> str:
    op = ins.opcode
    a = ins.args
    if op.shape == SHAPE_RR:
        return f"{ins.op} {reg_name(a[0])}, {reg_name(a[1])}"
    if op.shape == SHAPE_RI:
        imm = a[1]
        if isinstance(imm, RetTarget):
            imm = imm.value if imm.value is not None else f"@{imm.key}"
        return f"{ins.op} {reg_name(a[0])}, {imm}"
    if op.shape == SHAPE_R:
        return f"{ins.op} {reg_name(a[0])}"
    if op.shape in (SHAPE_RM, SHAPE_RRI):
        rd, rb, disp = a
        loc = f"[{reg_name(rb)}+{disp}]" if disp >= 0 else f"[{reg_name(rb)}{disp}]"
        return f"{ins.op} {reg_name(rd)}, {loc}"
    if op.shape == SHAPE_MR:
        rb, disp, rs = a
        loc = f"[{reg_name(rb)}+{disp}]" if disp >= 0 else f"[{reg_name(rb)}{disp}]"
        return f"{ins.op} {loc}, {reg_name(rs)}"
    if op.shape == SHAPE_RG:
        return f"{ins.op} {reg_name(a[0])}, {a[1]}"
    if op.shape == SHAPE_L:
        return f"{ins.op} {a[0]}"
    if op.shape == SHAPE_W:
        return f"{ins.op} {a[0]}"
    return ins.op


@dataclass(frozen=True)
class ClassLatency:
    """Synthetic single-step latency distribution for one class.

    Samples are ``mean`` plus Gaussian noise, with a ``tail_p`` chance of
    landing in a displaced wide secondary peak (slow context switches).
    Units are arbitrary cycle counts.
    """

    mean: float
    sigma: float
    tail_p: float = 0.05
    tail_shift: float = 800.0
    tail_sigma_mult: float = 3.0


@dataclass(frozen=True)
class LatencyModel:
    """Per-class latency parameters plus optional leak knobs.

    ``overrides`` pins individual opcodes to their own distributions (for
    what-if classification experiments); by default every opcode inherits
    its class parameters, so same-class opcodes are indistinguishable by
    construction. ``div_operand_leak`` adds ``div_leak_scale *
    bit_length(divisor)`` to division latencies, reproducing
    operand-dependent division timing. ``alignment_penalty`` adds
    ``alignment_penalty * (offset mod 8)`` to any non-fill instruction whose
    first byte is not slot-aligned. Both leak knobs default off. Fill
    no-ops are exempt from the alignment term: the multi-byte no-ops were
    verified alignment-insensitive.
    """

    classes: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    div_operand_leak: bool = False
    div_leak_scale: float = 6.0
    alignment_penalty: float = 0.0

    def params(self, key: str) -> ClassLatency:
        return self.classes[key]

    def params_for_opcode(self, mnemonic: str) -> ClassLatency:
        got = self.overrides.get(mnemonic)
        if got is not None:
            return got
        return self.classes[ALL_OPCODES[mnemonic].iclass]


def default_latency_model(**overrides) -> LatencyModel:
    # Means sit on a large context-switch pedestal; class separations are
    # sized so class1 vs class2 resolves at roughly 10^3 samples while
    # within-class pairs are identical by construction.
    classes = {
        CLASS1: ClassLatency(11000.0, 200.0),
        CLASS2: ClassLatency(11060.0, 200.0),
        LOAD: ClassLatency(11600.0, 220.0),
        STORE: ClassLatency(11800.0, 220.0),
        PTRADJUST: ClassLatency(11000.0, 200.0),
        EXIT: ClassLatency(12000.0, 250.0),
    }
    return LatencyModel(classes=classes, **overrides)


def latency_key(ins: Instruction) -> str:
    """Latency class drawn by the attacker simulator for a retired instruction."""
    return ins.opcode.iclass
