"""Translation of call-tree units into fixed-size, uniform code blocks.

Every emitted block is a sequence of 8-byte cells. A cell holds one payload
instruction plus a no-op fill; under the aligned variants the payload sits
at the cell base, otherwise the fill comes first and the payload ends flush
with the cell. Memory accesses span three cells (address setup, data
controller call, scratchpad access), divisions span two (flag save, then a
flag-restoring divide), and every block ends with a four-cell suffix: three
class1 cells that compute the next block id into the reserved ``cnext``
register, then the exit jump back to the code controller.

Protection variants:

  I-FixedLength     greedy fill, read+write up front, leftover cells padded
                    with bare no-ops (per-block instruction counts vary)
  II-FixedCount     same shape but unused payload cells hold dummy
                    instructions, fixing the retired count at ten payloads
  III-FixedPattern  slot classes follow the searched block pattern
  IV-AlignedPattern pattern plus payloads aligned to cell bases
  V-Ciphertext      aligned pattern executed with ciphertext freshness
                    (scratchpad rotation and counter interleaving)
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .interp import DataLayout, build_layout
from .isa import (
    CADDR,
    CLASS1,
    CLASS2,
    COND_TO_CMOV,
    CNEXT,
    CSP,
    CTMP,
    CTMP2,
    Instruction,
    LOAD,
    PTRADJUST,
    RetTarget,
    SHAPE_MR,
    SHAPE_R,
    SHAPE_RG,
    SHAPE_RI,
    SHAPE_RM,
    SHAPE_RR,
    SHAPE_RRI,
    STORE,
    encoded_length,
    is_reserved,
)
from .lowering import Item
from .patterngen import (
    ANY,
    BlockPattern,
    PAD,
    Placement,
    PatternMissingClass,
    SlotTemplate,
    fixed_count_template,
    pattern_template,
    place_items,
)
from .profiler import CallTreeUnit, lower_unit

VARIANT_I = "I-FixedLength"
VARIANT_II = "II-FixedCount"
VARIANT_III = "III-FixedPattern"
VARIANT_IV = "IV-AlignedPattern"
VARIANT_V = "V-Ciphertext"
VARIANTS = (VARIANT_I, VARIANT_II, VARIANT_III, VARIANT_IV, VARIANT_V)
PATTERN_VARIANTS = (VARIANT_III, VARIANT_IV, VARIANT_V)
ALIGNED_VARIANTS = (VARIANT_IV, VARIANT_V)

CELL_BYTES = 8
BLOCK_CELLS = 20
BLOCK_BYTES = BLOCK_CELLS * CELL_BYTES
FIXED_COUNT_PAYLOAD_CELLS = 10
HALT_ID = 0x7FFFFFFF
SUFFIX_CLASS = "suffix"


class RewriteError(Exception):
    pass


class ReservedRegisterUse(RewriteError):
    pass


class InstructionDoesNotFitPattern(RewriteError):
    pass


@dataclass(frozen=True)
class Cell:
    """One 8-byte slot: payload (None for a bare pad no-op) plus fill."""

    payload: Instruction | None
    unit_class: str              # class1|class2|load|store|suffix|pad
    latency_key: str             # latency class of the payload
    access: str | None = None    # load/store when this cell enters the data controller
    dummy: bool = False


@dataclass
class CodeBlock:
    block_id: int
    cells: list[Cell]
    payload_first: bool
    origin: tuple[str, str]      # hidden ground truth: (function, block label)
    chunk_index: int = 0

    def retires(self) -> list[tuple[str, int, bool]]:
        """Attacker-facing retirement skeleton: (latency key, offset, is_fill)."""
        out = []
        for i, cell in enumerate(self.cells):
            base = i * CELL_BYTES
            if cell.payload is None:
                out.append((CLASS1, base, True))
                continue
            plen = encoded_length(cell.payload)
            fill = CELL_BYTES - plen
            if self.payload_first:
                out.append((cell.latency_key, base, False))
                if fill:
                    out.append((CLASS1, base + plen, True))
            else:
                if fill:
                    out.append((CLASS1, base, True))
                out.append((cell.latency_key, base + fill, False))
        return out

    def data_accesses(self) -> list[tuple[int, str]]:
        return [(i, c.access) for i, c in enumerate(self.cells) if c.access]

    def class_signature(self) -> tuple:
        return tuple((c.unit_class, c.access) for c in self.cells)

    def image(self) -> bytes:
        """Deterministic byte image standing in for the encoded block."""
        parts = [b"%d|" % (1 if self.payload_first else 0)]
        for cell in self.cells:
            if cell.payload is None:
                parts.append(b"pad;")
                continue
            args = []
            for a in cell.payload.args:
                args.append(str(a.resolve() if hasattr(a, "resolve") else a))
            parts.append(f"{cell.payload.op}:{','.join(args)};".encode())
        return b"".join(parts)


@dataclass
class TranslationResult:
    unit: CallTreeUnit
    variant: str
    pattern: BlockPattern | None
    blocks: list[CodeBlock]
    entry_id: int
    first_block: dict[tuple[str, str], int]
    layout: DataLayout
    seed: int
    block_cells: int

    def block(self, block_id: int) -> CodeBlock:
        return self.blocks[block_id]


def dummy_for(iclass: str, dummy_addr: int = 0) -> tuple[Instruction, ...]:
    """Semantically inert payload(s) for an unused slot of the given class.

    class1 is an identity address computation (latency-matched, no flag
    side effects). class2 spans two slots: flag save plus a scratch-pair
    divide by one. load/store are full dummy accesses routed at the
    reserved dummy address. ptradjust adjusts a controller scratch register.
    """
    if iclass == CLASS1:
        return (Instruction("lea", (CTMP, CTMP, 0)),)
    if iclass == CLASS2:
        return (Instruction("fsave"), Instruction("ddiv"))
    if iclass == LOAD:
        return (
            Instruction("movi", (CADDR, dummy_addr)),
            Instruction("dload"),
            Instruction("sload", (CTMP2,)),
        )
    if iclass == STORE:
        return (
            Instruction("movi", (CADDR, dummy_addr)),
            Instruction("dstore"),
            Instruction("sstore", (CTMP2,)),
        )
    if iclass == PTRADJUST:
        return (Instruction("ptradjust", (CTMP2,)),)
    raise ValueError(f"no dummy for class {iclass!r}")


_SHAPE_REG_POS = {
    SHAPE_RR: (0, 1),
    SHAPE_RI: (0,),
    SHAPE_R: (0,),
    SHAPE_RM: (0, 1),
    SHAPE_RRI: (0, 1),
    SHAPE_MR: (0, 2),
    SHAPE_RG: (0,),
}


def check_reserved_registers(unit: CallTreeUnit) -> None:
    for fname, func in unit.functions.items():
        for bb in func.blocks:
            for ins in bb.instrs:
                for pos in _SHAPE_REG_POS.get(ins.opcode.shape, ()):
                    if is_reserved(ins.args[pos]):
                        raise ReservedRegisterUse(
                            f"{fname}.{bb.label}: {ins} touches a controller register"
                        )


def _memory_cells(item: Item | None, kind: str, dummy_addr: int, dummy: bool) -> list[Cell]:
    if dummy:
        # ctmp can be live across dummy cells (pushed return ids travel in
        # it), so dummies land in ctmp2 only.
        m1 = Instruction("movi", (CADDR, dummy_addr))
        m3 = Instruction("sload" if kind == LOAD else "sstore", (CTMP2,))
    else:
        ins = item.ins
        if kind == LOAD:
            m1 = Instruction("lea", (CADDR, ins.args[1], ins.args[2]))
            m3 = Instruction("sload", (ins.args[0],))
        else:
            m1 = Instruction("lea", (CADDR, ins.args[0], ins.args[1]))
            m3 = Instruction("sstore", (ins.args[2],))
    m2 = Instruction("dload" if kind == LOAD else "dstore")
    return [
        Cell(m1, kind, CLASS1, dummy=dummy),
        Cell(m2, kind, kind, access=kind, dummy=dummy),
        Cell(m3, kind, CLASS1, dummy=dummy),
    ]


def _class2_cells(item: Item | None, dummy: bool) -> list[Cell]:
    if dummy:
        return [
            Cell(Instruction("fsave"), CLASS2, CLASS1, dummy=True),
            Cell(Instruction("ddiv"), CLASS2, CLASS2, dummy=True),
        ]
    divisor = item.ins.args[0]
    return [
        Cell(Instruction("fsave"), CLASS2, CLASS1),
        Cell(Instruction("divr", (divisor,)), CLASS2, CLASS2),
    ]


def _entry_cells(entry, items, dummy_addr: int, rng: random.Random,
                 resolve_block) -> list[Cell]:
    cls, item_idx = entry
    if cls == PAD:
        return [Cell(None, "pad", CLASS1, dummy=True)]
    if item_idx is None:
        if cls == CLASS1:
            scratch = CTMP if rng.random() < 0.5 else CTMP2
            return [Cell(Instruction("lea", (scratch, scratch, 0)), CLASS1, CLASS1, dummy=True)]
        if cls == CLASS2:
            return _class2_cells(None, dummy=True)
        if cls in (LOAD, STORE):
            return _memory_cells(None, cls, dummy_addr, dummy=True)
        raise AssertionError(cls)
    item = items[item_idx]
    if cls == CLASS1:
        ins = item.ins
        if ins.args and isinstance(ins.args[-1], RetTarget):
            # Resolve the symbolic return id into a fresh instruction so the
            # lowered items stay reusable across translations.
            ins = Instruction(ins.op, ins.args[:-1] + (resolve_block(ins.args[-1].key),))
        return [Cell(ins, CLASS1, item.ins.opcode.iclass)]
    if cls == CLASS2:
        return _class2_cells(item, dummy=False)
    if cls in (LOAD, STORE):
        return _memory_cells(item, cls, dummy_addr, dummy=False)
    raise AssertionError(cls)


def _suffix_cells(kind: str, target: int | None, fallthrough: int | None,
                  cc: str | None) -> list[Cell]:
    def c1(ins):
        return Cell(ins, SUFFIX_CLASS, CLASS1)

    # Suffixes stage through ctmp2: ctmp can carry a pending return id
    # across chunk boundaries (push plumbing split over two blocks).
    if kind == "cond":
        cells = [
            c1(Instruction("movi", (CNEXT, fallthrough))),
            c1(Instruction("movi", (CTMP2, target))),
            c1(Instruction(COND_TO_CMOV[cc], (CNEXT, CTMP2))),
        ]
    elif kind == "ret_pop":
        # ctmp already holds the popped return id.
        cells = [
            c1(Instruction("mov", (CNEXT, CTMP))),
            c1(Instruction("lea", (CTMP2, CTMP2, 0))),
            c1(Instruction("mov", (CNEXT, CTMP))),
        ]
    else:  # unconditional: continuation, jmp, call entry, static halt
        cells = [
            c1(Instruction("movi", (CNEXT, target))),
            c1(Instruction("movi", (CTMP2, target))),
            c1(Instruction("mov", (CNEXT, CTMP2))),
        ]
    cells.append(Cell(Instruction("cjump"), SUFFIX_CLASS, "exit"))
    return cells


def _template_for(variant: str, pattern: BlockPattern | None) -> SlotTemplate:
    if variant in PATTERN_VARIANTS:
        return pattern_template(pattern)
    pad = PAD if variant == VARIANT_I else CLASS1
    return fixed_count_template(FIXED_COUNT_PAYLOAD_CELLS, pad)


def translate(unit: CallTreeUnit, pattern: BlockPattern | None, variant: str,
              seed: int = 0) -> TranslationResult:
    """Rewrite a unit into uniform code blocks under the given variant.

    Every original instruction appears exactly once and in order within its
    block's chunks; unfilled slots carry dummies, unmatched memory slots
    become dummy accesses against the reserved dummy address, conditional
    branches become cmov-selected next-block ids, and function calls and
    returns go through a shadow return stack in protected data space.
    """
    if variant not in VARIANTS:
        raise RewriteError(f"unknown variant {variant!r}")
    if (pattern is not None) != (variant in PATTERN_VARIANTS):
        raise RewriteError(f"variant {variant} {'requires' if variant in PATTERN_VARIANTS else 'does not take'} a pattern")
    check_reserved_registers(unit)
    lower_unit(unit)
    layout = build_layout(unit.program, unit.slab_entries())
    template = _template_for(variant, pattern)
    block_cells = (pattern.slot_count if pattern else BLOCK_CELLS)
    rng = random.Random(seed)

    # Pass 1: chunk every basic block and assign global block ids.
    placements: list[tuple[tuple[str, str], Placement]] = []
    first_block: dict[tuple[str, str], int] = {}
    next_id = 0
    for fname in unit.function_order():
        for lowered in unit.lowered[fname]:
            tags = tuple(item.tag for item in lowered.items)
            try:
                pl = place_items(tags, template)
            except PatternMissingClass as e:
                raise InstructionDoesNotFitPattern(f"{lowered.key}: {e}") from None
            placements.append((lowered.key, pl))
            first_block[lowered.key] = next_id
            next_id += len(pl.chunks)

    # Pass 2: materialize cells and suffixes (return ids resolve here).
    blocks: list[CodeBlock] = []
    payload_first = variant in ALIGNED_VARIANTS
    placement_iter = iter(placements)
    for fname in unit.function_order():
        func = unit.functions[fname]
        bb_first = {bb.label: first_block[(fname, bb.label)] for bb in func.blocks}
        for lowered in unit.lowered[fname]:
            key, pl = next(placement_iter)
            assert key == lowered.key
            base_id = first_block[key]
            nchunks = len(pl.chunks)
            for ci, chunk in enumerate(pl.chunks):
                cells: list[Cell] = []
                for entry in chunk:
                    cells.extend(_entry_cells(entry, lowered.items, layout.dummy_base,
                                              rng, first_block.__getitem__))
                if ci < nchunks - 1:
                    cells.extend(_suffix_cells("uncond", base_id + ci + 1, None, None))
                else:
                    term = lowered.term
                    if term.kind == "jmp":
                        cells.extend(_suffix_cells("uncond", bb_first[term.target], None, None))
                    elif term.kind == "cond":
                        cells.extend(_suffix_cells(
                            "cond", bb_first[term.target], bb_first[term.fallthrough], term.cc))
                    elif term.kind == "call":
                        cells.extend(_suffix_cells(
                            "uncond", first_block[(term.target, unit.functions[term.target].blocks[0].label)],
                            None, None))
                    elif term.kind == "ret":
                        if lowered.static_halt:
                            cells.extend(_suffix_cells("uncond", HALT_ID, None, None))
                        else:
                            cells.extend(_suffix_cells("ret_pop", None, None, None))
                    else:
                        raise AssertionError(term.kind)
                if len(cells) != block_cells:
                    raise RewriteError(
                        f"{key} chunk {ci}: {len(cells)} cells, expected {block_cells}"
                    )
                blocks.append(CodeBlock(base_id + ci, cells, payload_first, key, ci))

    root_entry = unit.functions[unit.root].blocks[0].label
    return TranslationResult(
        unit=unit,
        variant=variant,
        pattern=pattern,
        blocks=blocks,
        entry_id=first_block[(unit.root, root_entry)],
        first_block=first_block,
        layout=layout,
        seed=seed,
        block_cells=block_cells,
    )


def layout_variant_i(unit: CallTreeUnit, seed: int = 0) -> TranslationResult:
    """Greedy baseline: fill blocks with as many instructions as fit."""
    return translate(unit, None, VARIANT_I, seed)


def structural_scan(tr: TranslationResult) -> list[str]:
    """Uniformity violations across the emitted blocks of one unit.

    Pattern variants must agree on the (class, access kind) sequence at
    every slot index; the aligned variants must also start every payload at
    its cell base.
    """
    issues: list[str] = []
    if tr.variant in PATTERN_VARIANTS:
        ref = tr.blocks[0].class_signature()
        for b in tr.blocks:
            if b.class_signature() != ref:
                issues.append(f"block {b.block_id}: slot class sequence differs")
    if tr.variant in ALIGNED_VARIANTS:
        for b in tr.blocks:
            for key, offset, is_fill in b.retires():
                if not is_fill and offset % CELL_BYTES != 0:
                    issues.append(f"block {b.block_id}: payload at unaligned offset {offset}")
    return issues


def format_listing(tr: TranslationResult) -> str:
    """Compile-time block listing, one line per slot: ``idx: class payload fill``."""
    out = []
    for b in tr.blocks:
        out.append(f"block {b.block_id} ({b.origin[0]}.{b.origin[1]}#{b.chunk_index})")
        for i, cell in enumerate(b.cells):
            if cell.payload is None:
                out.append(f"  {i}: pad nopfill 8 fill=0")
                continue
            plen = encoded_length(cell.payload)
            mark = " dummy" if cell.dummy else ""
            out.append(f"  {i}: {cell.unit_class} {cell.payload} fill={CELL_BYTES - plen}{mark}")
    return "\n".join(out) + "\n"
