"""Simulated single-stepping and ciphertext adversary, plus the statistics.

The attacker interrupts after every retired instruction and observes per
instruction latency samples, per block instruction counts, scratchpad
ciphertexts and the (public) oblivious-store touch pattern. Latencies come
from the synthetic per-class model; Welch's t-test with the conventional
4.5 threshold decides whether two sample sets are distinguishable.

Ground-truth block identities never reach attacker-facing data; they are
used strictly to group observations for scoring, i.e. to ask "could an
attacker tell these two blocks apart", not to help the attack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .isa import (
    CLASS1,
    ClassLatency,
    LatencyModel,
    OPCODES,
    SHAPE_R,
    SHAPE_RI,
    SHAPE_RR,
    SHAPE_RRI,
    default_latency_model,
)

T_THRESHOLD = 4.5
PROGRESSION_CHECKPOINTS = (100, 1_000, 10_000, 100_000, 1_000_000)


class AttackError(Exception):
    pass


class InsufficientTraces(AttackError):
    pass


class DegenerateVariance(AttackError):
    pass


# ---------------------------------------------------------------------------
# Welch's t-test


@dataclass(frozen=True)
class TTestResult:
    t: float
    n_a: int
    n_b: int
    progression: tuple[tuple[int, float], ...]
    threshold: float = T_THRESHOLD

    @property
    def distinguishable(self) -> bool:
        return abs(self.t) >= self.threshold


def _welch_stat(a: np.ndarray, b: np.ndarray) -> float:
    ma, mb = float(a.mean()), float(b.mean())
    va = float(a.var(ddof=1))
    vb = float(b.var(ddof=1))
    denom = math.sqrt(va / len(a) + vb / len(b))
    if denom == 0.0:
        # Both samples constant: equal means are indistinguishable (t = 0),
        # different means get the infinite sentinel.
        return 0.0 if ma == mb else math.copysign(math.inf, ma - mb)
    return (ma - mb) / denom


def welch_t(a, b, threshold: float = T_THRESHOLD) -> TTestResult:
    """Unequal-variance two-sample t statistic with prefix progression.

    The progression evaluates t over geometric sample-count checkpoints so
    convergence (or transient false positives) is visible.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientTraces("need at least 2 samples per side")
    t = _welch_stat(a, b)
    n = min(len(a), len(b))
    points = [c for c in PROGRESSION_CHECKPOINTS if c < n] + [n]
    progression = tuple((c, _welch_stat(a[:c], b[:c])) for c in points)
    return TTestResult(t, len(a), len(b), progression, threshold)


def welch_t_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Welch statistic for (samples x slots) matrices."""
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    denom = np.sqrt(va / a.shape[0] + vb / b.shape[0])
    diff = ma - mb
    t = np.zeros(a.shape[1])
    ok = denom > 0
    t[ok] = diff[ok] / denom[ok]
    t[~ok & (diff != 0)] = np.inf * np.sign(diff[~ok & (diff != 0)])
    return t


# ---------------------------------------------------------------------------
# Latency sampling


def _mixture_draw(params: ClassLatency, shape, rng, extra_mean: float = 0.0) -> np.ndarray:
    base = rng.normal(params.mean + extra_mean, params.sigma, shape)
    tail = rng.random(shape) < params.tail_p
    if tail.any():
        slow = rng.normal(params.mean + extra_mean + params.tail_shift,
                          params.sigma * params.tail_sigma_mult, shape)
        base = np.where(tail, slow, base)
    return base


def sample_latencies(retires, n: int, model: LatencyModel | None = None,
                     rng=None) -> np.ndarray:
    """Synthesize (n x retired) latency observations for a block skeleton.

    ``retires`` is the per-block retirement skeleton from the rewriter:
    (latency class, byte offset, is_fill) per retired instruction. The
    optional alignment penalty applies to unaligned non-fill payloads only.
    """
    model = model or default_latency_model()
    rng = rng if rng is not None else np.random.default_rng(0)
    m = len(retires)
    means = np.empty(m)
    sigmas = np.empty(m)
    tail_shift = np.empty(m)
    tail_mult = np.empty(m)
    tail_p = np.empty(m)
    for i, (key, offset, is_fill) in enumerate(retires):
        p = model.params(key)
        mean = p.mean
        if model.alignment_penalty and not is_fill and offset % 8:
            mean += model.alignment_penalty * (offset % 8)
        means[i] = mean
        sigmas[i] = p.sigma
        tail_shift[i] = p.tail_shift
        tail_mult[i] = p.tail_sigma_mult
        tail_p[i] = p.tail_p
    base = rng.normal(means, sigmas, (n, m))
    tail = rng.random((n, m)) < tail_p
    slow = rng.normal(means + tail_shift, sigmas * tail_mult, (n, m))
    return np.where(tail, slow, base)


# ---------------------------------------------------------------------------
# ABBA microbenchmark and instruction classification


def abba_benchmark(op1: str, op2: str, n: int, model: LatencyModel | None = None,
                   seed: int = 0, drift_sigma: float = 0.5,
                   operand_bits: tuple[int, int] = (32, 32)) -> tuple[np.ndarray, np.ndarray]:
    """Paired latency samples from an interleaved op1/op2/op2/op1 gadget.

    Both instructions of a round share the same slow drift term, so drift
    cancels in the mean difference instead of masquerading as leakage.
    ``operand_bits`` feeds the optional operand-dependent division mode.
    """
    if op1 not in OPCODES or op2 not in OPCODES:
        raise ValueError("unknown opcode")
    if n < 1:
        raise ValueError("n must be >= 1")
    model = model or default_latency_model()
    rng = np.random.default_rng(seed)
    rounds = (n + 1) // 2

    def extra(op, bits):
        if model.div_operand_leak and OPCODES[op].tag == "div":
            return model.div_leak_scale * bits
        return 0.0

    drift = np.cumsum(rng.normal(0.0, drift_sigma, rounds))
    p1 = model.params_for_opcode(op1)
    p2 = model.params_for_opcode(op2)
    a = _mixture_draw(p1, (rounds, 2), rng, extra(op1, operand_bits[0])) + drift[:, None]
    b = _mixture_draw(p2, (rounds, 2), rng, extra(op2, operand_bits[1])) + drift[:, None]
    return a.reshape(-1)[:n], b.reshape(-1)[:n]


BENCHABLE_SHAPES = (SHAPE_RR, SHAPE_RI, SHAPE_R, SHAPE_RRI)


def benchable_opcodes() -> list[str]:
    return [
        name for name, op in OPCODES.items()
        if op.shape in BENCHABLE_SHAPES and op.tag != "ptradjust"
    ]


@dataclass
class ClassifyResult:
    classes: tuple[tuple[str, ...], ...]
    t_matrix: dict[tuple[str, str], float]
    warnings: tuple[str, ...] = ()


def classify(opcodes=None, n: int = 10_000, threshold: float = T_THRESHOLD,
             model: LatencyModel | None = None, seed: int = 0) -> ClassifyResult:
    """Partition opcodes into latency-indistinguishability classes.

    Runs the paired gadget for every opcode pair, links pairs whose |t|
    stays under the threshold, and reports connected components. Components
    whose members include a distinguishable pair (lost transitivity) are
    flagged with a warning rather than split.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    ops = list(opcodes) if opcodes is not None else benchable_opcodes()
    model = model or default_latency_model()
    t_matrix: dict[tuple[str, str], float] = {}
    adj: dict[str, set[str]] = {o: set() for o in ops}
    for i, o1 in enumerate(ops):
        for j in range(i + 1, len(ops)):
            o2 = ops[j]
            s1, s2 = abba_benchmark(o1, o2, n, model, seed=seed + i * 1009 + j)
            t = welch_t(s1, s2, threshold).t
            t_matrix[(o1, o2)] = t
            if abs(t) < threshold:
                adj[o1].add(o2)
                adj[o2].add(o1)

    seen: set[str] = set()
    classes: list[tuple[str, ...]] = []
    warnings: list[str] = []
    for o in ops:
        if o in seen:
            continue
        comp = []
        work = [o]
        while work:
            x = work.pop()
            if x in seen:
                continue
            seen.add(x)
            comp.append(x)
            work.extend(adj[x] - seen)
        comp.sort()
        classes.append(tuple(comp))
        for i, a in enumerate(comp):
            for b in comp[i + 1:]:
                t = t_matrix.get((a, b), t_matrix.get((b, a), 0.0))
                if abs(t) >= threshold:
                    warnings.append(
                        f"non-transitive component: {a} vs {b} has |t|={abs(t):.1f}"
                    )
    classes.sort(key=lambda c: (-len(c), c))
    return ClassifyResult(tuple(classes), t_matrix, tuple(warnings))


# ---------------------------------------------------------------------------
# Block distinguishing attacks


@dataclass(frozen=True)
class AttackerView:
    """What one measured execution exposes: ciphertext tags, scratchpad
    locations, per-block retirement counts and data access kinds."""

    tags: tuple[bytes, ...]
    locations: tuple[int, ...]
    counts: tuple[int, ...]
    data_kinds: tuple[tuple[str, ...], ...]

    def to_text(self) -> str:
        rows = []
        for tag, loc, cnt, kinds in zip(self.tags, self.locations, self.counts, self.data_kinds):
            rows.append(f"{tag.hex()} loc={loc} retired={cnt} data={','.join(kinds) or '-'}")
        return "\n".join(rows) + "\n"


@dataclass
class AttackSkeleton:
    """Deterministic structure of the victim computation.

    The victim re-runs the same computation for every measurement, so the
    fetch sequence is fixed; only measurement noise and (under rotation)
    scratchpad locations vary per execution.
    """

    variant: str
    fetch_blocks: tuple[int, ...]
    block_retires: dict[int, list]
    block_counts: dict[int, int]
    block_kinds: dict[int, tuple[str, ...]]
    images: dict[int, bytes]
    rotate: bool
    n_locations: int
    scratch_base: int
    scratch_align: int
    cipher: object
    first_block: dict

    _tags: dict[tuple[int, int], bytes] = field(default_factory=dict)

    def tag(self, block_id: int, loc: int) -> bytes:
        got = self._tags.get((block_id, loc))
        if got is None:
            addr = self.scratch_base + loc * self.scratch_align
            got = self.cipher.tag(addr, self.images[block_id])
            self._tags[(block_id, loc)] = got
        return got


def build_skeleton(tr, trace, engine) -> AttackSkeleton:
    ids = sorted({bid for bid, _ in trace.fetches})
    return AttackSkeleton(
        variant=tr.variant,
        fetch_blocks=tuple(bid for bid, _ in trace.fetches),
        block_retires={i: tr.blocks[i].retires() for i in ids},
        block_counts={i: len(tr.blocks[i].retires()) for i in ids},
        block_kinds={i: tuple(k for _, k in tr.blocks[i].data_accesses()) for i in ids},
        images={i: tr.blocks[i].image() for i in ids},
        rotate=engine.cfg.wants_code_rotation(),
        n_locations=engine.code_pad.locations,
        scratch_base=engine.code_pad.base,
        scratch_align=engine.code_pad.align,
        cipher=engine.cipher,
        first_block=dict(tr.first_block),
    )


def make_views(ske: AttackSkeleton, n: int, seed: int = 0) -> list[AttackerView]:
    """Synthesize n measured executions (tag streams and counts)."""
    rng = np.random.default_rng(seed)
    f = len(ske.fetch_blocks)
    if ske.rotate:
        locs = rng.integers(0, ske.n_locations, size=(n, f))
    else:
        locs = np.zeros((n, f), dtype=int)
    counts = tuple(ske.block_counts[b] for b in ske.fetch_blocks)
    kinds = tuple(ske.block_kinds[b] for b in ske.fetch_blocks)
    views = []
    for e in range(n):
        tags = tuple(ske.tag(b, int(locs[e, i])) for i, b in enumerate(ske.fetch_blocks))
        views.append(AttackerView(tags, tuple(int(x) for x in locs[e]), counts, kinds))
    return views


@dataclass
class CiphertextReport:
    reuse_at: int | None          # 1-based execution index of first cross-run tag reuse
    accuracy: float               # expected labeling accuracy, tag map from one run
    chance: float
    n_block_types: int
    injective: bool               # no two (block, location) pairs shared a tag
    executions: int

    @property
    def succeeds(self) -> bool:
        return self.accuracy >= self.chance + 0.25


def ciphertext_labeling(ske: AttackSkeleton, n_executions: int, seed: int = 0,
                        train_executions: int = 1,
                        targets: set[int] | None = None) -> CiphertextReport:
    """Label blocks by scratchpad ciphertext across repeated executions.

    The attacker learns tag -> label from the first execution(s) and applies
    the map to the rest; unseen tags force a uniform guess over the block
    types, so the reported accuracy is the exact expected accuracy of that
    strategy. Reuse is the first execution whose tag stream repeats a tag
    from an earlier execution. ``targets`` restricts labeling to the given
    block ids (e.g. the two blocks under attack); by default every fetched
    block is a labeling target.
    """
    if n_executions < 2:
        raise InsufficientTraces("need at least 2 executions")
    rng = np.random.default_rng(seed)
    f = len(ske.fetch_blocks)
    blocks = np.array(ske.fetch_blocks)
    target_set = targets if targets is not None else set(ske.fetch_blocks)
    col_mask = np.isin(blocks, sorted(target_set))
    k = len(target_set)
    if ske.rotate:
        locs = rng.integers(0, ske.n_locations, size=(n_executions, f))
    else:
        locs = np.zeros((n_executions, f), dtype=np.int64)
    # Pair key (block, loc) stands in for its tag; injectivity of the actual
    # cipher output over the observed pairs is checked explicitly below.
    pair_ids = blocks[None, :] * ske.n_locations + locs

    reuse_at = None
    seen: set[int] = set()
    for e in range(n_executions):
        row = set(int(x) for x in pair_ids[e])
        if e > 0 and row & seen:
            reuse_at = e + 1
            break
        seen |= row
    observed_pairs = set(int(x) for x in pair_ids.reshape(-1))
    tag_bytes = {p: ske.tag(p // ske.n_locations, p % ske.n_locations) for p in observed_pairs}
    injective = len(set(tag_bytes.values())) == len(tag_bytes)

    train = pair_ids[:train_executions, col_mask].reshape(-1)
    trained = np.unique(train)
    test = pair_ids[train_executions:][:, col_mask]
    known = np.isin(test, trained)
    n_known = int(known.sum())
    total = test.size
    # A known tag always recovers the right block (tags are injective), an
    # unknown tag is a uniform guess.
    accuracy = (n_known + (total - n_known) / k) / total if total else 0.0
    return CiphertextReport(reuse_at, accuracy, 1.0 / k, k, injective, n_executions)


@dataclass
class DistinguishReport:
    variant: str
    n_executions: int
    count_a: int
    count_b: int
    count_attack: bool
    slot_t: np.ndarray
    flagged_slots: tuple[int, ...]
    latency_attack: bool
    ciphertext: CiphertextReport
    threshold: float = T_THRESHOLD

    def succeeded(self) -> set[str]:
        out = set()
        if self.count_attack:
            out.add("count")
        if self.latency_attack:
            out.add("latency")
        if self.ciphertext.succeeds:
            out.add("ciphertext")
        return out


def distinguish_blocks(tr, trace, engine, target_a, target_b, n_executions: int,
                       seed: int = 0, model: LatencyModel | None = None,
                       threshold: float = T_THRESHOLD) -> DistinguishReport:
    """Run the three distinguishing attacks against two source blocks.

    ``target_a``/``target_b`` name source basic blocks ((function, label)
    keys or labels within the root); their first emitted code blocks are the
    measurement targets. Ground truth selects which fetches belong to which
    target; everything measured is attacker-visible.
    """
    if n_executions < 2:
        raise InsufficientTraces("need at least 2 executions")
    ske = build_skeleton(tr, trace, engine)
    a_id = _resolve_target(tr, target_a)
    b_id = _resolve_target(tr, target_b)
    executed = set(ske.fetch_blocks)
    if a_id not in executed or b_id not in executed:
        raise InsufficientTraces("target blocks never executed in the trace")

    count_a = ske.block_counts[a_id]
    count_b = ske.block_counts[b_id]
    count_attack = count_a != count_b

    model = model or default_latency_model()
    rng = np.random.default_rng(seed)
    ra, rb = ske.block_retires[a_id], ske.block_retires[b_id]
    m = min(len(ra), len(rb))
    sa = sample_latencies(ra[:m], n_executions, model, rng)
    sb = sample_latencies(rb[:m], n_executions, model, rng)
    slot_t = welch_t_columns(sa, sb)
    flagged = tuple(int(i) for i in np.nonzero(np.abs(slot_t) >= threshold)[0])

    cipher_rep = ciphertext_labeling(ske, n_executions, seed=seed + 1,
                                     targets={a_id, b_id})
    return DistinguishReport(
        variant=tr.variant,
        n_executions=n_executions,
        count_a=count_a,
        count_b=count_b,
        count_attack=count_attack,
        slot_t=slot_t,
        flagged_slots=flagged,
        latency_attack=bool(flagged),
        ciphertext=cipher_rep,
        threshold=threshold,
    )


def _resolve_target(tr, target) -> int:
    if isinstance(target, tuple):
        key = target
    elif "." in target:
        f, lbl = target.split(".", 1)
        key = (f, lbl)
    else:
        key = (tr.unit.root, target)
    if key not in tr.first_block:
        raise AttackError(f"no basic block named {key}")
    return tr.first_block[key]
