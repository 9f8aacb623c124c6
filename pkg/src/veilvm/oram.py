"""Oblivious block stores, ciphertext modeling and access accounting.

Two store organizations are provided. Linear stores touch every entry once
per access and select the wanted pair behind a constant-time mask, which
makes the physical touch trace independent of the address and the access
kind. The Path ORAM client keeps blocks in a tree of 4-block buckets with
a stash and position map; its constant-time cost model charges
``bucket * levels`` touches for the path fetch and ``(bucket * levels)^2``
buffer touches for the oblivious write-back, which is what makes linear
scans win until stores grow to a couple thousand blocks.

Encryption is modeled as a keyed 128-bit hash of (address, plaintext):
deterministic per location like real memory encryption, collision-free for
all practical purposes at this scale, and explicitly not real cryptography.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

DATA_BLOCK = 16        # logical data block bytes
ENC_BLOCK = 16         # encryption block bytes
CHUNK = ENC_BLOCK // 2  # data chunk / counter width under interleaving
ORAM_BASE = 0x60000000


class OramError(Exception):
    pass


class AddressMissing(OramError):
    pass


class UnalignedSpanBeyondPair(OramError):
    pass


class CiphertextModel:
    """Deterministic keyed pseudo-encryption: tag = H(key, address, plaintext)."""

    def __init__(self, key: bytes = b"veilvm-memory-encryption-model"):
        self.key = key

    def tag(self, address: int, plaintext: bytes) -> bytes:
        h = hashlib.blake2b(key=self.key, digest_size=16)
        h.update(address.to_bytes(8, "little", signed=False))
        h.update(plaintext)
        return h.digest()


@dataclass
class TouchTrace:
    events: list[tuple[int, int, str]] = field(default_factory=list)
    seq: int = 0

    def begin(self) -> int:
        self.seq += 1
        return self.seq

    def touch(self, idx: int, kind: str) -> None:
        self.events.append((self.seq, idx, kind))

    def per_access(self) -> list[list[tuple[int, str]]]:
        out: dict[int, list] = {}
        for seq, idx, kind in self.events:
            out.setdefault(seq, []).append((idx, kind))
        return [out[k] for k in sorted(out)]


def dump_trace(trace: TouchTrace) -> str:
    return "\n".join(f"{s} {i} {k}" for s, i, k in trace.events) + "\n"


@dataclass
class AccessResult:
    pair: tuple[int, int]
    data: bytes              # concatenated logical pair content
    pair_base: int           # flat address covered by the first block
    touches: int
    violation: bool = False  # lazily inserted object broke obliviousness


class LinearOram:
    """Constant-time linear scan over fixed-size blocks.

    Every access performs exactly one scan: any staged write-back from the
    previous access is applied and the requested adjacent pair is selected,
    all while touching each entry exactly once. Stores stage their data via
    :meth:`stage_writeback` and reach the array at the next scan.
    """

    def __init__(self, block_size: int = DATA_BLOCK, trace: bool = False,
                 lazy_resolver=None):
        self.block_size = block_size
        self.entries: list[bytearray] = []
        self.ranges: list[tuple[int, int, int]] = []  # (base addr, first idx, nblocks)
        self.lazy_resolver = lazy_resolver
        self.trace = TouchTrace() if trace else None
        self.access_count = 0
        self.touch_count = 0
        self._staged: tuple[tuple[int, int], bytes] | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.entries)

    def insert_object(self, base_addr: int, size: int, init: bytes = b"") -> list[int]:
        nblocks = (size + self.block_size - 1) // self.block_size
        first = len(self.entries)
        data = init + b"\x00" * (nblocks * self.block_size - len(init))
        for k in range(nblocks):
            self.entries.append(bytearray(data[k * self.block_size:(k + 1) * self.block_size]))
        self.ranges.append((base_addr, first, nblocks))
        return list(range(first, first + nblocks))

    def index_of(self, addr: int) -> tuple[int, int] | None:
        for base, first, nblocks in self.ranges:
            if base <= addr < base + nblocks * self.block_size:
                off = addr - base
                return first + off // self.block_size, base + (off // self.block_size) * self.block_size
        return None

    def access(self, addr: int, kind: str, width: int = 8) -> AccessResult:
        """Fetch the two adjacent blocks covering ``addr`` (single scan)."""
        violation = False
        found = self.index_of(addr)
        if found is None:
            if self.lazy_resolver is None:
                raise AddressMissing(f"address {addr:#x} not resident")
            resolved = self.lazy_resolver(addr)
            if resolved is None:
                raise AddressMissing(f"address {addr:#x} maps to no known object")
            base, size, init = resolved
            self.insert_object(base, size, init)
            violation = True
            found = self.index_of(addr)
        idx, block_base = found
        second = idx + 1 if idx + 1 < self.n_blocks else idx
        if addr + width > block_base + 2 * self.block_size or (
            second == idx and addr + width > block_base + self.block_size
        ):
            raise UnalignedSpanBeyondPair(
                f"{width}-byte access at {addr:#x} spans past the fetched pair"
            )

        self.access_count += 1
        if self.trace:
            self.trace.begin()
        staged = self._staged
        self._staged = None
        fetched = [b"", b""]
        for i in range(self.n_blocks):
            # Constant-time model: one touch per entry, masked select/update.
            self.touch_count += 1
            if self.trace:
                self.trace.touch(i, "scan")
            if staged is not None:
                (s0, s1), data = staged
                if i == s0:
                    self.entries[i][:] = data[: self.block_size]
                elif i == s1 and s1 != s0:
                    self.entries[i][:] = data[self.block_size: 2 * self.block_size]
            if i == idx:
                fetched[0] = bytes(self.entries[i])
            if i == second:
                fetched[1] = bytes(self.entries[i])
        return AccessResult((idx, second), fetched[0] + fetched[1], block_base,
                            self.n_blocks, violation)

    def stage_writeback(self, pair: tuple[int, int], data: bytes) -> None:
        self._staged = (pair, bytes(data))

    def flush(self) -> None:
        if self._staged is None:
            return
        (s0, s1), data = self._staged
        self.entries[s0][:] = data[: self.block_size]
        if s1 != s0:
            self.entries[s1][:] = data[self.block_size: 2 * self.block_size]
        self._staged = None

    # Test-facing convenience: one value in, one value out.
    def write8(self, addr: int, value: bytes) -> AccessResult:
        res = self.access(addr, "store", len(value))
        off = addr - res.pair_base
        data = bytearray(res.data)
        data[off:off + len(value)] = value
        self.stage_writeback(res.pair, bytes(data))
        return res

    def read8(self, addr: int, width: int = 8) -> bytes:
        res = self.access(addr, "load", width)
        off = addr - res.pair_base
        return res.data[off:off + width]


class CodeOramStore:
    """Linear code store with payload deduplication.

    Uniform blocks repeat heavily, so the scan runs over an index array into
    a table of unique payloads; the touch trace is identical to scanning the
    full block array.
    """

    def __init__(self, images: list[bytes], compress: bool = True, trace: bool = False):
        self.compress = compress
        if compress:
            table: dict[bytes, int] = {}
            self.index: list[int] = []
            for img in images:
                self.index.append(table.setdefault(img, len(table)))
            self.payloads: list[bytes] = list(table)
        else:
            self.index = list(range(len(images)))
            self.payloads = list(images)
        self.trace = TouchTrace() if trace else None
        self.access_count = 0
        self.touch_count = 0

    @property
    def n_blocks(self) -> int:
        return len(self.index)

    def fetch(self, block_id: int) -> bytes:
        if not 0 <= block_id < self.n_blocks:
            raise AddressMissing(f"code block {block_id} out of range")
        self.access_count += 1
        if self.trace:
            self.trace.begin()
        out = b""
        for i in range(self.n_blocks):
            self.touch_count += 1
            if self.trace:
                self.trace.touch(i, "scan")
            if i == block_id:
                out = self.payloads[self.index[i]]
        return out


@dataclass
class StashEvent:
    access: int
    stash_size: int


class PathOram:
    """Tree-organized oblivious store with stash and flat position map."""

    def __init__(self, n_blocks: int, bucket: int = 4, stash_bound: int = 64,
                 seed: int = 0, trace: bool = False):
        import random

        if bucket < 1:
            raise ValueError("bucket size must be >= 1")
        if n_blocks < 1:
            raise ValueError("need at least one block")
        self.bucket = bucket
        self.levels = max(1, math.ceil(math.log2(n_blocks)))
        self.leaves = 2 ** (self.levels - 1)
        self.n_nodes = 2 ** self.levels - 1
        self.tree: list[list[tuple[int, bytes]]] = [[] for _ in range(self.n_nodes)]
        self.position: dict[int, int] = {}
        self.stash: dict[int, bytes] = {}
        self.stash_bound = stash_bound
        self.stash_events: list[StashEvent] = []
        self.rng = random.Random(seed)
        self.trace = TouchTrace() if trace else None
        self.leaf_history: list[int] = []
        self.access_count = 0
        self.fetch_touches = 0
        self.writeback_touches = 0

    def insert(self, addr: int, value: bytes) -> None:
        self.position[addr] = self.rng.randrange(self.leaves)
        self.stash[addr] = bytes(value)
        self._evict(self.position[addr])

    def _path(self, leaf: int) -> list[int]:
        node = self.leaves - 1 + leaf
        path = []
        while True:
            path.append(node)
            if node == 0:
                break
            node = (node - 1) // 2
        return path[::-1]  # root first

    def access(self, addr: int, kind: str, payload: bytes | None = None) -> bytes:
        if addr not in self.position:
            raise AddressMissing(f"address {addr} not in position map")
        self.access_count += 1
        if self.trace:
            self.trace.begin()
        leaf = self.position[addr]
        self.leaf_history.append(leaf)
        path = self._path(leaf)

        # Fetch: every bucket slot along the path is read into the stash.
        self.fetch_touches += self.bucket * self.levels
        for node in path:
            if self.trace:
                self.trace.touch(node, "path")
            for a, v in self.tree[node]:
                self.stash[a] = v
            self.tree[node] = []

        value = self.stash.get(addr, b"")
        if kind == "store":
            if payload is None:
                raise ValueError("store needs a payload")
            self.stash[addr] = bytes(payload)

        # Accessed address moves to a fresh random leaf before write-back.
        self.position[addr] = self.rng.randrange(self.leaves)

        self._evict(leaf)
        # Constant-time write-back cost: every buffer entry is touched for
        # every path node.
        self.writeback_touches += (self.bucket * self.levels) ** 2
        size = len(self.stash)
        if size > self.stash_bound:
            self.stash_events.append(StashEvent(self.access_count, size))
        return value

    def _evict(self, leaf: int) -> None:
        # Greedy write-back, deepest node first. A block whose (new) leaf
        # shares the fetched path down to depth c may live at any depth <= c,
        # so a node at depth d accepts blocks with common depth >= d.
        path = self._path(leaf)
        by_depth: list[list[int]] = [[] for _ in range(self.levels)]
        for a in self.stash:
            by_depth[self._common_depth(leaf, self.position[a])].append(a)
        for d in range(self.levels - 1, -1, -1):
            bucket = self.tree[path[d]]
            c = self.levels - 1
            while len(bucket) < self.bucket and c >= d:
                if by_depth[c]:
                    a = by_depth[c].pop()
                    bucket.append((a, self.stash.pop(a)))
                else:
                    c -= 1
        # Whatever found no room stays in the stash.

    def _common_depth(self, leaf_a: int, leaf_b: int) -> int:
        # Depth (root = 0) of the deepest shared node of two leaf paths.
        d = self.levels - 1
        a, b = leaf_a, leaf_b
        while a != b:
            a >>= 1
            b >>= 1
            d -= 1
        return d


def path_fetch_touches(bucket: int, n_blocks: int) -> int:
    levels = max(1, math.ceil(math.log2(n_blocks)))
    return bucket * levels


def path_total_touches(bucket: int, n_blocks: int) -> int:
    f = path_fetch_touches(bucket, n_blocks)
    return f + f * f


@dataclass(frozen=True)
class BreakEven:
    n_star: int
    path_touches: int
    linear_touches: int


def break_even(bucket: int, n_max: int = 1 << 20) -> BreakEven:
    """Smallest store size where the Path ORAM touch model beats a linear scan."""
    if bucket < 1:
        raise ValueError("bucket size must be >= 1")
    for n in range(2, n_max + 1):
        pt = path_total_touches(bucket, n)
        if pt < n:
            return BreakEven(n, pt, n)
    raise OramError(f"no break-even below {n_max}")


class DataBlockStore:
    """16-byte data blocks with optional counter interleaving and tags.

    With ``interleave`` enabled each block is stored as two 8-byte data
    chunks, each followed by an 8-byte counter, giving two encryption blocks
    per data block. Counters increment on every write-back, covering the
    whole array, so every store refreshes every ciphertext; a tag can only
    repeat after 2^64 writes. Without interleaving the raw 16 bytes are
    deterministically encrypted in place, which is exactly the leak the
    ciphertext variant exists to remove.
    """

    def __init__(self, interleave: bool = False, cipher: CiphertextModel | None = None,
                 trace: bool = False, lazy_resolver=None):
        self.interleave = interleave
        self.cipher = cipher or CiphertextModel()
        self.oram = LinearOram(DATA_BLOCK, trace=trace, lazy_resolver=lazy_resolver)
        self.counters: list[list[int]] = []   # per block: [c0, c1]
        self.counter_writes = 0

    @property
    def n_blocks(self) -> int:
        return self.oram.n_blocks

    @property
    def touch_count(self) -> int:
        return self.oram.touch_count

    @property
    def access_count(self) -> int:
        return self.oram.access_count

    def insert_object(self, base_addr: int, size: int, init: bytes = b"") -> list[int]:
        idxs = self.oram.insert_object(base_addr, size, init)
        while len(self.counters) < self.oram.n_blocks:
            self.counters.append([0, 0])
        return idxs

    def entry_address(self, idx: int) -> int:
        stride = 2 * ENC_BLOCK if self.interleave else DATA_BLOCK
        return ORAM_BASE + idx * stride

    def entry_tags(self, idx: int) -> tuple[bytes, ...]:
        data = bytes(self.oram.entries[idx])
        base = self.entry_address(idx)
        if not self.interleave:
            return (self.cipher.tag(base, data),)
        c0, c1 = self.counters[idx]
        enc0 = data[:CHUNK] + c0.to_bytes(CHUNK, "little")
        enc1 = data[CHUNK:] + c1.to_bytes(CHUNK, "little")
        return (self.cipher.tag(base, enc0), self.cipher.tag(base + ENC_BLOCK, enc1))

    def access(self, addr: int, kind: str, width: int = 8) -> AccessResult:
        res = self.oram.access(addr, kind, width)
        if res.violation:
            while len(self.counters) < self.oram.n_blocks:
                self.counters.append([0, 0])
        return res

    def stage_writeback(self, pair: tuple[int, int], data: bytes) -> None:
        self.oram.stage_writeback(pair, data)
        if self.interleave:
            # Every counter in the store advances with the write-back, so
            # the whole array re-encrypts.
            for c in self.counters:
                c[0] += 1
                c[1] += 1
            self.counter_writes += 2 * len(self.counters)

    def flush(self) -> None:
        self.oram.flush()

    def fresh_write(self, idx: int, halves: tuple[bytes, bytes]) -> tuple[bytes, bytes]:
        """Write one block with counter-merged encryption, returning both tags."""
        if not 0 <= idx < self.n_blocks:
            raise AddressMissing(f"block {idx} out of range")
        if not self.interleave:
            raise OramError("fresh_write requires the interleaved layout")
        self.counters[idx][0] += 1
        self.counters[idx][1] += 1
        self.counter_writes += 2
        self.oram.entries[idx][:CHUNK] = halves[0]
        self.oram.entries[idx][CHUNK:] = halves[1]
        tags = self.entry_tags(idx)
        return tags[0], tags[1]

    @staticmethod
    def repeat_bound(enc_block: int = ENC_BLOCK) -> int:
        return 2 ** (4 * enc_block)

    def read_range(self, base_addr: int, size: int) -> bytes:
        """Direct (non-oblivious) read for final-state comparison."""
        self.flush()
        out = bytearray()
        addr = base_addr
        while len(out) < size:
            found = self.oram.index_of(addr)
            if found is None:
                raise AddressMissing(f"address {addr:#x} not resident")
            idx, block_base = found
            block = self.oram.entries[idx]
            off = addr - block_base
            take = min(DATA_BLOCK - off, size - len(out))
            out.extend(block[off:off + take])
            addr += take
        return bytes(out)
