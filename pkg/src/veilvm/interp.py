"""Machine state, data layout and the reference interpreter.

The interpreter executes programs natively (no obfuscation) and serves as
the semantics oracle: a protected run must end in the same observable state.
Flags are limited to zero/sign/carry. Division writes quotient to r0 and
remainder to r1 and leaves flags untouched, which keeps division slots
flag-transparent in translated code as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    CADDR,
    CNEXT,
    CONDJUMPS,
    CRET,
    CSP,
    CTMP,
    CTMP2,
    CWF,
    Instruction,
    MASK64,
    REG_COUNT,
    RESERVED_REGS,
    RetTarget,
    SIGN_BIT,
    is_reserved,
)
from .parser import Program


class ExecError(Exception):
    pass


class FuelExhausted(ExecError):
    pass


class MemoryFault(ExecError):
    pass


DATA_BASE = 0x1000
BLOCK16 = 16


@dataclass
class DataLayout:
    """Flat address assignment for the dummy entry, shadow stack and globals.

    All objects are 16-byte aligned so each occupies whole oblivious data
    blocks. The dummy entry is the landing zone for dummy accesses; the
    shadow slab backs pending return ids (sized by call-tree depth, zero for
    call-free units).
    """

    objects: list[tuple[str, int, int]] = field(default_factory=list)
    dummy_base: int = 0
    slab_base: int = 0
    slab_size: int = 0
    end: int = DATA_BASE
    _index: dict[str, tuple[int, int]] = field(default_factory=dict)

    def addr_of(self, name: str) -> int:
        return self._index[name][0]

    def size_of(self, name: str) -> int:
        return self._index[name][1]

    def object_at(self, addr: int) -> tuple[str, int, int] | None:
        for name, base, size in self.objects:
            if base <= addr < base + size:
                return name, base, size
        return None


def _pad16(n: int) -> int:
    return (n + BLOCK16 - 1) // BLOCK16 * BLOCK16


def build_layout(prog: Program, slab_entries: int = 0, with_dummy: bool = True) -> DataLayout:
    lay = DataLayout()
    cursor = DATA_BASE
    if with_dummy:
        lay.dummy_base = cursor
        cursor += BLOCK16
    lay.slab_base = cursor
    lay.slab_size = _pad16(slab_entries * 8)
    cursor += lay.slab_size
    for d in prog.datas:
        size = _pad16(d.size)
        lay.objects.append((d.name, cursor, d.size))
        lay._index[d.name] = (cursor, d.size)
        cursor += size
    lay.end = cursor
    return lay


class MachineState:
    """Registers, flags and flat memory for one execution.

    Reserved controller registers live beside the application file and are
    never touched by application instructions; the rewriter enforces that.
    A state is confined to a single execution at a time.
    """

    __slots__ = (
        "regs", "fz", "fs", "fc", "mem", "layout", "rip_bias",
        "caddr", "cret", "cwf", "cnext", "ctmp", "ctmp2", "csp",
        "saved_flags", "bounds_check",
    )

    def __init__(self, layout: DataLayout, bounds_check: bool = True):
        self.regs = [0] * REG_COUNT
        self.fz = False
        self.fs = False
        self.fc = False
        self.mem = bytearray(layout.end)
        self.layout = layout
        self.rip_bias = 0
        self.caddr = 0
        self.cret = 0
        self.cwf = 0
        self.cnext = 0
        self.ctmp = 0
        self.ctmp2 = 0
        self.csp = 0
        self.saved_flags = (False, False, False)
        self.bounds_check = bounds_check

    _CREG_ATTR = {
        CADDR: "caddr", CRET: "cret", CWF: "cwf", CNEXT: "cnext",
        CTMP: "ctmp", CTMP2: "ctmp2", CSP: "csp",
    }

    def get_reg(self, code: int) -> int:
        if code < REG_COUNT:
            return self.regs[code]
        return getattr(self, self._CREG_ATTR[code])

    def set_reg(self, code: int, value: int) -> None:
        value &= MASK64
        if code < REG_COUNT:
            self.regs[code] = value
        else:
            setattr(self, self._CREG_ATTR[code], value)

    def flags(self) -> tuple[bool, bool, bool]:
        return (self.fz, self.fs, self.fc)

    def set_zs(self, value: int) -> None:
        self.fz = value == 0
        self.fs = bool(value & SIGN_BIT)

    def check_bounds(self, addr: int, width: int) -> None:
        if not self.bounds_check:
            if addr < 0 or addr + width > len(self.mem):
                raise MemoryFault(f"access at {addr:#x} outside memory image")
            return
        obj = self.layout.object_at(addr)
        if obj is None:
            raise MemoryFault(f"access at {addr:#x} hits no declared object")
        name, base, size = obj
        if addr + width > base + _pad16(size):
            raise MemoryFault(f"access at {addr:#x} overruns object {name!r}")

    def read_mem(self, addr: int, width: int = 8) -> int:
        self.check_bounds(addr, width)
        return int.from_bytes(self.mem[addr:addr + width], "little")

    def write_mem(self, addr: int, value: int, width: int = 8) -> None:
        self.check_bounds(addr, width)
        self.mem[addr:addr + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def read_object(self, name: str) -> bytes:
        base, size = self.layout._index[name]
        return bytes(self.mem[base:base + size])

    def snapshot(self) -> dict:
        return {
            "regs": tuple(self.regs),
            "flags": self.flags(),
            "objects": {name: self.read_object(name) for name, _, _ in self.layout.objects},
        }


def _imm_operand(v) -> int:
    return v.resolve() if isinstance(v, RetTarget) else v


def execute_instruction(state: MachineState, ins: Instruction) -> None:
    """Apply one non-control instruction to the state.

    Handles application ALU/memory opcodes plus the flag scaffolding and
    pointer adjustment pseudo-ops. Data-controller pseudo-ops (dload,
    sload, ...) are the execution engine's job and are rejected here.
    """
    op = ins.op
    a = ins.args
    if op == "mov":
        state.set_reg(a[0], state.get_reg(a[1]))
    elif op == "movi":
        state.set_reg(a[0], _imm_operand(a[1]))
    elif op in ("add", "addi"):
        x = state.get_reg(a[0])
        y = state.get_reg(a[1]) if op == "add" else (a[1] & MASK64)
        r = x + y
        state.fc = r > MASK64
        r &= MASK64
        state.set_reg(a[0], r)
        state.set_zs(r)
    elif op == "sub":
        x, y = state.get_reg(a[0]), state.get_reg(a[1])
        state.fc = x < y
        r = (x - y) & MASK64
        state.set_reg(a[0], r)
        state.set_zs(r)
    elif op == "imul":
        x, y = _signed(state.get_reg(a[0])), _signed(state.get_reg(a[1]))
        full = x * y
        r = full & MASK64
        state.fc = _signed(r) != full
        state.set_reg(a[0], r)
        state.set_zs(r)
    elif op in ("and", "or", "xor", "ori"):
        x = state.get_reg(a[0])
        y = state.get_reg(a[1]) if op in ("and", "or", "xor") else (a[1] & MASK64)
        if op == "and":
            r = x & y
        elif op == "xor":
            r = x ^ y
        else:
            r = x | y
        state.set_reg(a[0], r)
        state.set_zs(r)
        state.fc = False
    elif op in ("shl", "shr", "shlr", "shrr"):
        x = state.get_reg(a[0])
        n = (a[1] if op in ("shl", "shr") else state.get_reg(a[1])) & 63
        if n:
            if op in ("shl", "shlr"):
                state.fc = bool((x >> (64 - n)) & 1)
                r = (x << n) & MASK64
            else:
                state.fc = bool((x >> (n - 1)) & 1)
                r = x >> n
            state.set_reg(a[0], r)
            state.set_zs(r)
    elif op == "inc":
        # Carry unaffected, mirroring the usual increment semantics.
        r = (state.get_reg(a[0]) + 1) & MASK64
        state.set_reg(a[0], r)
        state.set_zs(r)
    elif op in ("cmp", "cmpi"):
        x = state.get_reg(a[0])
        y = state.get_reg(a[1]) if op == "cmp" else (a[1] & MASK64)
        state.fc = x < y
        r = (x - y) & MASK64
        state.fz = r == 0
        state.fs = bool(r & SIGN_BIT)
    elif op == "lea":
        state.set_reg(a[0], state.get_reg(a[1]) + a[2])
    elif op == "leag":
        # Position-independent address formation: picks up the displacement
        # between the block's home location and wherever it actually runs.
        state.set_reg(a[0], state.layout.addr_of(a[1]) + state.rip_bias)
    elif op == "ptradjust":
        state.set_reg(a[0], state.get_reg(a[0]) - state.rip_bias)
    elif op in ("cmovz", "cmovnz", "cmovs"):
        take = state.fz if op == "cmovz" else (not state.fz if op == "cmovnz" else state.fs)
        if take:
            state.set_reg(a[0], state.get_reg(a[1]))
    elif op in ("div", "divr"):
        divisor = state.get_reg(a[0])
        if divisor == 0:
            raise ExecError("division by zero")
        x = state.regs[0]
        state.regs[0] = x // divisor
        state.regs[1] = x % divisor
        if op == "divr":
            state.fz, state.fs, state.fc = state.saved_flags
    elif op == "ddiv":
        # Dummy division of ctmp by one into the controller scratch pair;
        # inert apart from the scratch remainder, flag-transparent.
        state.ctmp2 = 0
        state.fz, state.fs, state.fc = state.saved_flags
    elif op == "fsave":
        state.saved_flags = state.flags()
    elif op == "load":
        addr = state.get_reg(a[1]) + a[2]
        state.set_reg(a[0], state.read_mem(addr))
    elif op == "store":
        addr = state.get_reg(a[0]) + a[1]
        state.write_mem(addr, state.get_reg(a[2]))
    elif op == "nopfill":
        pass
    else:
        raise ExecError(f"cannot execute {op!r} outside the engine")


def _signed(v: int) -> int:
    return v - (1 << 64) if v & SIGN_BIT else v


def apply_presets(state: MachineState, regs: dict[int, int] | None, mem: dict[str, bytes] | None,
                  prog: Program) -> None:
    for d in prog.datas:
        if d.init:
            base = state.layout.addr_of(d.name)
            state.mem[base:base + len(d.init)] = d.init
    if mem:
        for name, data in mem.items():
            base, size = state.layout._index[name]
            if len(data) > size:
                raise ValueError(f"preset for {name!r} exceeds declared size")
            state.mem[base:base + len(data)] = data
    if regs:
        for code, value in regs.items():
            state.set_reg(code, value)


def interpret(prog: Program, regs: dict[int, int] | None = None,
              mem: dict[str, bytes] | None = None, fuel: int = 1_000_000,
              layout: DataLayout | None = None) -> MachineState:
    """Run a program natively and return the final machine state.

    ``fuel`` bounds retired instructions (terminators included). Execution
    ends when the entry function returns. Deterministic for fixed inputs.
    """
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    layout = layout or build_layout(prog)
    state = MachineState(layout)
    apply_presets(state, regs, mem, prog)

    func = prog.functions[prog.entry]
    index = {f.name: f for f in prog.functions.values()}
    bb_index = {f.name: f.block_index() for f in prog.functions.values()}
    callstack: list[tuple[str, int]] = []
    fname, bbi = prog.entry, 0
    remaining = fuel

    while True:
        bb = index[fname].blocks[bbi]
        for ins in bb.instrs:
            if remaining <= 0:
                raise FuelExhausted(f"fuel exhausted in {fname}")
            remaining -= 1
            execute_instruction(state, ins)
        if remaining <= 0:
            raise FuelExhausted(f"fuel exhausted in {fname}")
        remaining -= 1
        term = bb.term
        if term.kind == "jmp":
            bbi = bb_index[fname][term.target]
        elif term.kind == "cond":
            flag, wanted = CONDJUMPS[term.cc]
            val = state.fz if flag == "z" else state.fs
            bbi = bb_index[fname][term.target if val == wanted else term.fallthrough]
        elif term.kind == "call":
            if term.target not in index:
                raise ExecError(f"call to unknown function {term.target!r}")
            callstack.append((fname, bb_index[fname][term.fallthrough]))
            fname, bbi = term.target, 0
        elif term.kind == "ret":
            if not callstack:
                return state
            fname, bbi = callstack.pop()
        else:
            raise AssertionError(term.kind)
