"""Block patterns, translation-cost simulation and pattern search.

A block pattern is the slot-class sequence every code block of a protected
unit follows. Patterns are searched to minimize estimated runtime cost,
where cost counts the expensive events only: emitted blocks (one oblivious
code fetch each) and dummy memory slots (one oblivious data access each,
stores weighted double). Small search spaces are scanned exhaustively; a
genetic search covers the rest.

The greedy placement simulator in this module is the single source of truth
for how items map to slots; the rewriter materializes its output directly,
so estimated and actual dummy/block counts agree exactly.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .isa import CLASS1, CLASS2, LOAD, PTRADJUST, STORE
from .profiler import BlockProfile

TAG_ORDER = (CLASS1, CLASS2, LOAD, STORE)
TAG_WIDTH = {CLASS1: 1, CLASS2: 2, LOAD: 3, STORE: 3}
ANY = "any"          # variant I/II payload cells, accept any non-memory class
PAD = "pad"          # unfilled payload cell
SUFFIX_CELLS = 4


class PatternError(Exception):
    pass


class InvalidPattern(PatternError):
    pass


class PatternMissingClass(PatternError):
    pass


class SearchSpaceTooLarge(PatternError):
    pass


@dataclass(frozen=True)
class BlockPattern:
    """Ordered pre-suffix slot classes plus the total expanded cell count.

    Each class1 tag expands to one 8-byte slot, class2 to two (division
    needs flag scaffolding), load/store to three (address setup, controller
    call, scratchpad access); the fixed suffix occupies four more.
    """

    tags: tuple[str, ...]
    slot_count: int = 20

    def __post_init__(self):
        for t in self.tags:
            if t not in TAG_WIDTH:
                raise InvalidPattern(f"unknown pattern tag {t!r}")
        width = sum(TAG_WIDTH[t] for t in self.tags) + SUFFIX_CELLS
        if width != self.slot_count:
            raise InvalidPattern(
                f"pattern expands to {width} slots, declared {self.slot_count}"
            )
        if not self.tags:
            raise InvalidPattern("pattern needs at least one payload slot")

    def body_cells(self) -> int:
        return self.slot_count - SUFFIX_CELLS

    def store_slots(self) -> int:
        return sum(1 for t in self.tags if t == STORE)

    def format(self) -> str:
        return " ".join(self.tags) + " suffix"


def parse_pattern(text: str, slot_count: int | None = None) -> BlockPattern:
    toks = text.split()
    if toks and toks[-1] == "suffix":
        toks = toks[:-1]
    tags = tuple(toks)
    width = sum(TAG_WIDTH.get(t, 0) for t in tags) + SUFFIX_CELLS
    return BlockPattern(tags, slot_count if slot_count is not None else width)


@dataclass(frozen=True)
class SlotTemplate:
    """Placement target: pattern tags, or the fixed variant I/II shape."""

    units: tuple[str, ...]
    pad_tag: str = PAD     # entry tag for unfilled ANY units

    def matchable_tags(self) -> set[str]:
        tags = set()
        for u in self.units:
            if u == ANY:
                tags |= {CLASS1, PTRADJUST, CLASS2}
            elif u == CLASS1:
                tags |= {CLASS1, PTRADJUST}
            else:
                tags.add(u)
        return tags


def pattern_template(pattern: BlockPattern) -> SlotTemplate:
    return SlotTemplate(pattern.tags)


def fixed_count_template(payload_cells: int = 10, pad_tag: str = CLASS1) -> SlotTemplate:
    """Variant I/II shape: one read and one write up front, then payload cells."""
    return SlotTemplate((LOAD, STORE) + (ANY,) * payload_cells, pad_tag)


@dataclass
class Placement:
    """Chunks of (cell-class, item index or None) entries, one chunk per block."""

    chunks: list[list[tuple[str, int | None]]]
    dummy_loads: int
    dummy_stores: int

    @property
    def blocks(self) -> int:
        return len(self.chunks)


def _matches(unit: str, tag: str) -> int:
    """Units consumed when ``tag`` goes into ``unit`` (0 = no match)."""
    if unit == CLASS1:
        return 1 if tag in (CLASS1, PTRADJUST) else 0
    if unit == ANY:
        if tag in (CLASS1, PTRADJUST):
            return 1
        if tag == CLASS2:
            return 2  # two adjacent free payload cells
        return 0
    return 1 if unit == tag else 0


def place_items(tags, template: SlotTemplate) -> Placement:
    """Greedy in-order placement of items against repeated template copies.

    Items are placed left to right; slots skipped along the way and slots
    left over when a block closes become dummies. Raises
    :class:`PatternMissingClass` if some item can never be placed.
    """
    units = template.units
    n = len(units)
    matchable = template.matchable_tags()
    for t in tags:
        if t not in matchable:
            raise PatternMissingClass(f"no slot in pattern accepts {t!r}")

    chunks: list[list[tuple[str, int | None]]] = []
    dummy_loads = dummy_stores = 0
    cur: list[tuple[str, int | None]] = []
    pos = 0

    def fill_to(end: int):
        nonlocal dummy_loads, dummy_stores, pos
        while pos < end:
            u = units[pos]
            if u == LOAD:
                dummy_loads += 1
                cur.append((LOAD, None))
            elif u == STORE:
                dummy_stores += 1
                cur.append((STORE, None))
            elif u == ANY:
                cur.append((template.pad_tag, None))
            else:
                cur.append((u, None))
            pos += 1

    def close():
        nonlocal cur, pos
        fill_to(n)
        chunks.append(cur)
        cur = []
        pos = 0

    for item_idx, t in enumerate(tags):
        while True:
            found = None
            consumed = 1
            scan = pos
            while scan < n:
                c = _matches(units[scan], t)
                if c == 1 or (c == 2 and scan + 1 < n and units[scan + 1] == ANY):
                    found = scan
                    consumed = c
                    break
                scan += 1
            if found is None:
                close()
                continue
            fill_to(found)
            cell_class = t if t != PTRADJUST else CLASS1
            if units[found] != ANY:
                cell_class = units[found]
            cur.append((cell_class, item_idx))
            pos = found + consumed
            break
    close()
    return Placement(chunks, dummy_loads, dummy_stores)


@dataclass(frozen=True)
class ProfileCost:
    key: tuple[str, str]
    weight: float
    blocks: int
    dummy_loads: int
    dummy_stores: int
    cost: float


@dataclass(frozen=True)
class CostReport:
    entries: tuple[ProfileCost, ...]
    total: float
    store_weight: float = 2.0


def estimate_cost(pattern: BlockPattern, profiles: list[BlockProfile],
                  store_weight: float = 2.0) -> CostReport:
    """Simulate translating every profile against the pattern and price it.

    Per profile: weight * (blocks + dummy_loads + store_weight * dummy_stores).
    """
    template = pattern_template(pattern)
    entries = []
    total = 0.0
    for p in profiles:
        pl = place_items(p.class_seq, template)
        cost = p.weight * (pl.blocks + pl.dummy_loads + store_weight * pl.dummy_stores)
        entries.append(ProfileCost(p.key, p.weight, pl.blocks, pl.dummy_loads, pl.dummy_stores, cost))
        total += cost
    return CostReport(tuple(entries), total, store_weight)


def mandatory_classes(profiles) -> tuple[str, ...]:
    present = set()
    for p in profiles:
        for t in p.class_seq:
            present.add(CLASS1 if t == PTRADJUST else t)
    return tuple(t for t in TAG_ORDER if t in present)


def _score_key(pattern_tags, cost_total):
    stores = sum(1 for t in pattern_tags if t == STORE)
    return (cost_total, stores, pattern_tags)


def brute_force(slot_count: int, profiles: list[BlockProfile],
                store_weight: float = 2.0, bound: int = 10**6) -> BlockPattern:
    """Exhaustive scan of all valid patterns for small free-slot counts.

    The search space estimate is 4**free_slots where free slots are those
    left after the suffix and one mandatory occurrence of each profile
    class; above ``bound`` the scan refuses to run. Ties break toward fewer
    store slots, then lexicographically.
    """
    mandatory = mandatory_classes(profiles)
    man_width = sum(TAG_WIDTH[t] for t in mandatory)
    body = slot_count - SUFFIX_CELLS
    free = body - man_width
    if free < 0:
        raise InvalidPattern(
            f"{slot_count} slots cannot hold mandatory classes {mandatory}"
        )
    if 4 ** free > bound:
        raise SearchSpaceTooLarge(
            f"4^{free} candidate arrangements exceed the enumeration bound {bound}"
        )

    best = None
    seq: list[str] = []

    def dfs(width: int):
        nonlocal best
        if width == body:
            tags = tuple(seq)
            if any(t not in tags for t in mandatory):
                return
            pat = BlockPattern(tags, slot_count)
            total = estimate_cost(pat, profiles, store_weight).total
            key = _score_key(tags, total)
            if best is None or key < best[0]:
                best = (key, pat)
            return
        for t in TAG_ORDER:
            if width + TAG_WIDTH[t] <= body:
                seq.append(t)
                dfs(width + TAG_WIDTH[t])
                seq.pop()

    dfs(0)
    if best is None:
        raise InvalidPattern(f"no valid pattern of {slot_count} slots exists")
    return best[1]


@dataclass(frozen=True)
class SearchCaps:
    generations: int = 10_000
    wall_time_s: float = 10.0
    top_k: int = 15
    # Stop after this many generations without improvement; the search
    # reliably converges within a few hundred generations, so waiting for
    # the hard caps just burns compile time.
    stall_generations: int = 150


@dataclass
class SearchStats:
    generations: int = 0
    evaluations: int = 0
    population_size: int = 0
    best_history: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def population_size(top_k: int) -> int:
    return 2 * top_k * top_k + 2 * top_k


def genetic_search(slot_count: int, profiles: list[BlockProfile],
                   caps: SearchCaps = SearchCaps(), seed: int = 0,
                   store_weight: float = 2.0, mutation_p: float = 0.5,
                   return_stats: bool = False):
    """Evolve a pattern population toward minimum estimated cost.

    Each generation: repair candidates (inject one occurrence of any missing
    mandatory class, then renormalize to the exact slot budget), score, keep
    the ``top_k`` best as T, mutate a copy T~, cross T and T~ both ways by
    splicing random prefixes with random suffixes, then continue with
    P := crossovers + T + T~ with duplicates replaced by fresh random
    candidates. Always returns a valid pattern; fixed seeds reproduce runs.
    """
    mandatory = mandatory_classes(profiles)
    man_width = sum(TAG_WIDTH[t] for t in mandatory)
    body = slot_count - SUFFIX_CELLS
    if body < max(man_width, 1):
        raise InvalidPattern(f"{slot_count} slots cannot hold mandatory classes {mandatory}")

    rng = random.Random(seed)
    t = caps.top_k
    pop_n = population_size(t)
    memo: dict[tuple[str, ...], float] = {}
    stats = SearchStats(population_size=pop_n)

    def rand_candidate() -> tuple[str, ...]:
        seq = []
        width = 0
        while width < body:
            opts = [x for x in TAG_ORDER if width + TAG_WIDTH[x] <= body]
            x = rng.choice(opts)
            seq.append(x)
            width += TAG_WIDTH[x]
        return tuple(seq)

    def repair(seq: tuple[str, ...]) -> tuple[str, ...]:
        out = list(seq)
        for m in mandatory:
            if m not in out:
                out.insert(rng.randrange(len(out) + 1), m)
        counts = {}
        for x in out:
            counts[x] = counts.get(x, 0) + 1
        width = sum(TAG_WIDTH[x] for x in out)
        while width > body:
            removable = [
                i for i, x in enumerate(out)
                if x not in mandatory or counts[x] > 1
            ]
            i = rng.choice(removable)
            counts[out[i]] -= 1
            width -= TAG_WIDTH[out[i]]
            del out[i]
        while width < body:
            out.insert(rng.randrange(len(out) + 1), CLASS1)
            width += 1
        return tuple(out)

    def score(cand: tuple[str, ...]) -> float:
        got = memo.get(cand)
        if got is None:
            got = estimate_cost(BlockPattern(cand, slot_count), profiles, store_weight).total
            memo[cand] = got
            stats.evaluations += 1
        return got

    def mutate(cand: tuple[str, ...]) -> tuple[str, ...]:
        if rng.random() >= mutation_p:
            return cand
        out = list(cand)
        kind = rng.randrange(3)
        if kind == 0:
            out.insert(rng.randrange(len(out) + 1), rng.choice(TAG_ORDER))
        elif kind == 1 and len(out) > 1:
            del out[rng.randrange(len(out))]
        else:
            out[rng.randrange(len(out))] = rng.choice(TAG_ORDER)
        return tuple(out)

    def crossover(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[str, ...]:
        i = rng.randrange(len(a) + 1)
        j = rng.randrange(len(b) + 1)
        child = a[:i] + b[j:]
        return child if child else (CLASS1,)

    pop = [rand_candidate() for _ in range(pop_n)]
    best_key = None
    best_pat = None
    stall = 0
    start = time.monotonic()

    while True:
        pop = [repair(c) for c in pop]
        scored = sorted(((score(c), sum(1 for x in c if x == STORE), c) for c in pop))
        gen_best = scored[0]
        key = (gen_best[0], gen_best[1], gen_best[2])
        if best_key is None or key < best_key:
            best_key = key
            best_pat = gen_best[2]
            stall = 0
        else:
            stall += 1
        stats.generations += 1
        stats.best_history.append(best_key[0])
        elapsed = time.monotonic() - start
        if (stats.generations >= caps.generations or elapsed >= caps.wall_time_s
                or stall >= caps.stall_generations):
            break

        top = [c for _, _, c in scored[:t]]
        mutated = [mutate(c) for c in top]
        crossed = [crossover(a, b) for a in top for b in mutated]
        crossed += [crossover(b, a) for a in top for b in mutated]
        pop = crossed + top + mutated
        seen = set()
        for i, c in enumerate(pop):
            if c in seen:
                pop[i] = rand_candidate()
            else:
                seen.add(c)

    stats.wall_time_s = time.monotonic() - start
    result = BlockPattern(best_pat, slot_count)
    if return_stats:
        return result, stats
    return result
