"""Oblivious execution engine: code/data controllers, scratchpads, block loop.

One engine instance executes one translated unit strictly sequentially. The
code controller fetches the next block from the code store into the code
scratchpad and runs its slots; memory slots enter the data controller,
which first flushes any deferred write-back, then fetches the two adjacent
data blocks into the data scratchpad; the slot payload then reads or writes
the scratchpad; the block suffix selects the next block id and jumps back
to the controller. Execution ends when the selected id is the halt
sentinel. Final observable state must match the plain interpreter.

Under the ciphertext variant both scratchpads rotate over aligned pools
(the code pool holds 160 candidate locations) and the data store interleaves
counters, so no write ever repeats a ciphertext.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interp import DataLayout, MachineState, apply_presets, execute_instruction
from .isa import LatencyModel, default_latency_model
from .oram import (
    AddressMissing,
    CiphertextModel,
    CodeOramStore,
    DataBlockStore,
    PathOram,
    DATA_BLOCK,
)
from .rewriter import (
    BLOCK_BYTES,
    CELL_BYTES,
    HALT_ID,
    TranslationResult,
    VARIANT_V,
)

CODE_HOME_BASE = 0x10000000
CODE_SCRATCH_BASE = 0x40000000
CODE_SCRATCH_POOL = 40960
CODE_SCRATCH_ALIGN = 256
DATA_SCRATCH_BASE = 0x50000000
DATA_SCRATCH_POOL = 4096
DATA_SCRATCH_ALIGN = 32


class EngineError(Exception):
    pass


class StepBudgetExhausted(EngineError):
    pass


@dataclass
class EngineConfig:
    variant: str
    seed: int = 0
    code_compress: bool = True
    data_backend: str = "linear"          # linear | path
    lazy_data_init: bool = False
    step_budget: int = 2_000_000
    trace: str = "summary"                # none | summary | full
    rotate_code: bool | None = None       # default: only the ciphertext variant
    rotate_data: bool | None = None
    sample_latencies: bool = False
    latency_model: LatencyModel | None = None
    cipher_key: bytes = b"veilvm-memory-encryption-model"

    def wants_code_rotation(self) -> bool:
        return self.rotate_code if self.rotate_code is not None else self.variant == VARIANT_V

    def wants_data_rotation(self) -> bool:
        return self.rotate_data if self.rotate_data is not None else self.variant == VARIANT_V


class Scratchpad:
    """Aligned staging pool; the active location is fixed or rotated per use."""

    def __init__(self, base: int, pool_bytes: int, align: int):
        if pool_bytes < align or pool_bytes % align:
            raise ValueError("pool must be a positive multiple of the alignment")
        self.base = base
        self.align = align
        self.locations = pool_bytes // align
        self.active = 0

    def rotate(self, rng) -> int:
        """Uniform draw over the candidate locations (with replacement)."""
        self.active = int(rng.integers(self.locations))
        return self.active

    def address(self) -> int:
        return self.base + self.active * self.align


@dataclass
class DataEvent:
    seq: int
    kind: str
    touches: int
    dummy: bool
    violation: bool
    scratch_loc: int
    scratch_tag: bytes | None = None


@dataclass
class ExecutionTrace:
    """Run record. Block ids and flat addresses are ground truth for the
    correctness checker; the attacker-facing serialization carries only
    ciphertext tags, scratchpad locations, retirement counts and latency
    samples."""

    variant: str
    fetches: list[tuple[int, int]] = field(default_factory=list)   # (hidden id, loc)
    code_tags: list[bytes] = field(default_factory=list)
    data_events: list[DataEvent] = field(default_factory=list)
    retired: int = 0
    code_fetches: int = 0
    code_touches: int = 0
    data_accesses: int = 0
    data_touches: int = 0
    counter_writes: int = 0
    dummy_data_accesses: int = 0
    real_data_accesses: int = 0
    violations: int = 0
    latencies: list[np.ndarray] | None = None

    def attacker_text(self) -> str:
        out = []
        for i, (_, loc) in enumerate(self.fetches):
            tag = self.code_tags[i].hex() if i < len(self.code_tags) else ""
            out.append(f"fetch loc={loc} tag={tag}")
            if self.latencies is not None:
                vals = " ".join(f"{v:.1f}" for v in self.latencies[i])
                out.append(f"  latency {vals}")
        for ev in self.data_events:
            tag = ev.scratch_tag.hex() if ev.scratch_tag else ""
            out.append(f"data kind={ev.kind} loc={ev.scratch_loc} tag={tag}")
        return "\n".join(out) + "\n"

    def debug_text(self) -> str:
        out = []
        for i, (bid, loc) in enumerate(self.fetches):
            tag = self.code_tags[i].hex() if i < len(self.code_tags) else ""
            out.append(f"fetch block={bid} loc={loc} tag={tag}")
        return "\n".join(out) + "\n"


@dataclass
class RunResult:
    state: MachineState
    trace: ExecutionTrace


class _PathDataStore:
    """Path ORAM backend behind the data-controller interface (no counters)."""

    def __init__(self, seed: int):
        self.ranges: list[tuple[int, int, int]] = []
        self.blocks = 0
        self.pending: tuple[tuple[int, int], bytes] | None = None
        self._items: list[tuple[int, bytes]] = []
        self.oram: PathOram | None = None
        self.seed = seed
        self.counter_writes = 0

    def insert_object(self, base: int, size: int, init: bytes = b""):
        n = (size + DATA_BLOCK - 1) // DATA_BLOCK
        data = init + b"\x00" * (n * DATA_BLOCK - len(init))
        first = self.blocks
        for k in range(n):
            self._items.append((first + k, data[k * DATA_BLOCK:(k + 1) * DATA_BLOCK]))
        self.ranges.append((base, first, n))
        self.blocks += n

    def seal(self):
        self.oram = PathOram(max(2, self.blocks), seed=self.seed)
        for idx, val in self._items:
            self.oram.insert(idx, val)

    @property
    def n_blocks(self):
        return self.blocks

    @property
    def access_count(self):
        return self.oram.access_count if self.oram else 0

    @property
    def touch_count(self):
        if not self.oram:
            return 0
        return self.oram.fetch_touches + self.oram.writeback_touches

    def index_of(self, addr: int):
        for base, first, nblocks in self.ranges:
            if base <= addr < base + nblocks * DATA_BLOCK:
                off = addr - base
                return first + off // DATA_BLOCK, base + (off // DATA_BLOCK) * DATA_BLOCK
        return None

    def access(self, addr: int, kind: str, width: int = 8):
        from .oram import AccessResult

        if self.oram is None:
            self.seal()
        found = self.index_of(addr)
        if found is None:
            raise AddressMissing(f"address {addr:#x} not resident")
        idx, block_base = found
        self._flush()
        second = idx + 1 if idx + 1 < self.blocks else idx
        before = self.touch_count
        d0 = self.oram.access(idx, "load")
        d1 = self.oram.access(second, "load") if second != idx else d0
        return AccessResult((idx, second), d0 + d1, block_base,
                            self.touch_count - before, False)

    def stage_writeback(self, pair, data: bytes):
        self.pending = (pair, bytes(data))

    def _flush(self):
        if self.pending is None:
            return
        (s0, s1), data = self.pending
        self.pending = None
        self.oram.access(s0, "store", data[:DATA_BLOCK])
        if s1 != s0:
            self.oram.access(s1, "store", data[DATA_BLOCK:])

    def flush(self):
        if self.oram is None:
            self.seal()
        self._flush()

    def read_range(self, base: int, size: int) -> bytes:
        self.flush()
        out = bytearray()
        addr = base
        while len(out) < size:
            idx, block_base = self.index_of(addr)
            block = self.oram.access(idx, "load")
            off = addr - block_base
            take = min(DATA_BLOCK - off, size - len(out))
            out.extend(block[off:off + take])
            addr += take
        return bytes(out)


def init_data_oram(tr: TranslationResult, cfg: EngineConfig,
                   mem_presets: dict[str, bytes] | None = None):
    """Build the data store: dummy entry, shadow-stack slab, then globals.

    With lazy init only the dummy entry is resident up front; everything
    else is inserted on first touch, flagged in the trace as an
    obliviousness violation.
    """
    layout = tr.layout
    prog = tr.unit.program

    def object_contents(name: str, size: int) -> bytes:
        init = b""
        for d in prog.datas:
            if d.name == name:
                init = d.init
        if mem_presets and name in mem_presets:
            given = mem_presets[name]
            init = given + init[len(given):]
        return init + b"\x00" * (size - len(init))

    slab_init = b""
    if tr.unit.root_called_internally:
        slab_init = HALT_ID.to_bytes(8, "little")

    entries: list[tuple[str, int, int, bytes]] = [("__dummy__", layout.dummy_base, DATA_BLOCK, b"")]
    if layout.slab_size:
        entries.append(("__slab__", layout.slab_base, layout.slab_size, slab_init))
    for name, base, size in layout.objects:
        entries.append((name, base, size, object_contents(name, size)))

    def resolver(addr: int):
        for _, base, size, init in entries:
            padded = (size + DATA_BLOCK - 1) // DATA_BLOCK * DATA_BLOCK
            if base <= addr < base + padded:
                return base, size, init
        return None

    if cfg.data_backend == "path":
        if cfg.variant == VARIANT_V:
            raise EngineError("counter interleaving requires the linear data store")
        store = _PathDataStore(cfg.seed)
        for _, base, size, init in entries:
            store.insert_object(base, size, init)
        store.seal()
        return store

    store = DataBlockStore(
        interleave=(cfg.variant == VARIANT_V),
        cipher=CiphertextModel(cfg.cipher_key),
        trace=(cfg.trace == "full"),
        lazy_resolver=resolver if cfg.lazy_data_init else None,
    )
    if cfg.lazy_data_init:
        store.insert_object(layout.dummy_base, DATA_BLOCK)
    else:
        for _, base, size, init in entries:
            store.insert_object(base, size, init)
    return store


class Engine:
    """Drives one translated unit; see the module docstring for the loop."""

    def __init__(self, tr: TranslationResult, cfg: EngineConfig,
                 mem_presets: dict[str, bytes] | None = None):
        self.tr = tr
        self.cfg = cfg
        self.cipher = CiphertextModel(cfg.cipher_key)
        self._mem_presets = mem_presets
        self._fresh_stores(mem_presets)

    def _fresh_stores(self, mem_presets) -> None:
        tr, cfg = self.tr, self.cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.code = CodeOramStore([b.image() for b in tr.blocks],
                                  compress=cfg.code_compress,
                                  trace=(cfg.trace == "full"))
        self.data = init_data_oram(tr, cfg, mem_presets)
        self.code_pad = Scratchpad(CODE_SCRATCH_BASE, CODE_SCRATCH_POOL, CODE_SCRATCH_ALIGN)
        self.data_pad = Scratchpad(DATA_SCRATCH_BASE, DATA_SCRATCH_POOL, DATA_SCRATCH_ALIGN)
        self._used = False

    def run(self, regs: dict[int, int] | None = None,
            mem: dict[str, bytes] | None = None) -> RunResult:
        tr, cfg = self.tr, self.cfg
        mem = mem if mem is not None else self._mem_presets
        if self._used:
            # Stores are confined to one run; rebuild for a fresh execution.
            self._fresh_stores(mem)
        self._used = True
        state = MachineState(tr.layout, bounds_check=False)
        apply_presets(state, regs, mem, tr.unit.program)
        # The interpreter-visible memory image is not used for data accesses
        # here (those go through the ORAM); it only seeds leag address math.
        if tr.unit.root_called_internally:
            state.csp = tr.layout.slab_base + 8
        else:
            state.csp = tr.layout.slab_base

        trace = ExecutionTrace(variant=cfg.variant)
        budget = cfg.step_budget
        scratch = bytearray(2 * DATA_BLOCK)
        scratch_base_addr = 0
        scratch_pair = None

        def data_controller(kind: str, addr: int, dummy: bool):
            nonlocal scratch, scratch_base_addr, scratch_pair
            # Any write staged by a previous store slot is flushed by this
            # fetch's scan before the new pair is selected.
            res = self.data.access(addr, kind)
            if cfg.wants_data_rotation():
                self.data_pad.rotate(self.rng)
            scratch[:] = res.data
            scratch_base_addr = res.pair_base
            scratch_pair = res.pair
            trace.data_accesses += 1
            trace.data_touches += res.touches
            if res.violation:
                trace.violations += 1
            if dummy:
                trace.dummy_data_accesses += 1
            else:
                trace.real_data_accesses += 1
            if cfg.trace == "full":
                tag = self.cipher.tag(self.data_pad.address(), bytes(scratch))
                trace.data_events.append(DataEvent(
                    trace.data_accesses, kind, res.touches, dummy,
                    res.violation, self.data_pad.active, tag))

        state.cnext = tr.entry_id
        while state.cnext != HALT_ID:
            block_id = state.cnext
            if not 0 <= block_id < len(tr.blocks):
                raise EngineError(f"next block id {block_id} out of range")
            block = tr.blocks[block_id]
            image = self.code.fetch(block_id)
            trace.code_fetches += 1
            trace.code_touches += self.code.n_blocks
            if cfg.wants_code_rotation():
                self.code_pad.rotate(self.rng)
            loc = self.code_pad.active
            state.rip_bias = self.code_pad.address() - (CODE_HOME_BASE + block_id * BLOCK_BYTES)
            if cfg.trace != "none":
                trace.fetches.append((block_id, loc))
                trace.code_tags.append(self.cipher.tag(self.code_pad.address(), image))

            for cell_idx, cell in enumerate(block.cells):
                budget -= 1 if cell.payload is None else 2
                if budget < 0:
                    raise StepBudgetExhausted(f"step budget {cfg.step_budget} exhausted")
                ins = cell.payload
                if ins is None:
                    continue
                op = ins.op
                if op == "dload" or op == "dstore":
                    state.cret = cell_idx  # return-offset handshake
                    state.cwf = 1 if op == "dstore" else 0
                    data_controller("load" if op == "dload" else "store",
                                    state.caddr, cell.dummy)
                elif op == "sload":
                    off = state.caddr - scratch_base_addr
                    if not 0 <= off <= 2 * DATA_BLOCK - 8:
                        raise EngineError(f"scratchpad offset {off} out of range")
                    state.set_reg(ins.args[0], int.from_bytes(scratch[off:off + 8], "little"))
                elif op == "sstore":
                    off = state.caddr - scratch_base_addr
                    if not 0 <= off <= 2 * DATA_BLOCK - 8:
                        raise EngineError(f"scratchpad offset {off} out of range")
                    scratch[off:off + 8] = state.get_reg(ins.args[0]).to_bytes(8, "little")
                    # Deferred write-back: staged now, applied at the next scan.
                    self.data.stage_writeback(scratch_pair, bytes(scratch))
                elif op == "cjump":
                    pass
                else:
                    execute_instruction(state, ins)
            trace.retired += sum(1 if c.payload is None else 2 for c in block.cells)

        self.data.flush()
        trace.counter_writes = getattr(self.data, "counter_writes", 0)
        if cfg.sample_latencies and cfg.trace != "none":
            trace.latencies = sample_trace_latencies(tr, trace, cfg)
        return RunResult(state, trace)

    def final_objects(self) -> dict[str, bytes]:
        """Post-run contents of every declared global, read back from the ORAM."""
        out = {}
        for name, base, size in self.tr.layout.objects:
            out[name] = self.data.read_range(base, size)
        return out


def run_unit(tr: TranslationResult, cfg: EngineConfig,
             regs: dict[int, int] | None = None,
             mem: dict[str, bytes] | None = None) -> tuple[RunResult, Engine]:
    eng = Engine(tr, cfg, mem)
    result = eng.run(regs, mem)
    return result, eng


def sample_trace_latencies(tr: TranslationResult, trace: ExecutionTrace,
                           cfg: EngineConfig) -> list[np.ndarray]:
    """Draw one latency sample per retired instruction of a finished run."""
    from .sidechannel import sample_latencies

    model = cfg.latency_model or default_latency_model()
    rng = np.random.default_rng(cfg.seed + 0x5A17)
    out = []
    for block_id, _ in trace.fetches:
        retires = tr.blocks[block_id].retires()
        out.append(sample_latencies(retires, 1, model, rng)[0])
    return out
