"""Call-tree extraction and weighted block class profiles.

A protection root is instrumented together with its entire call tree so a
single block pattern covers everything that executes obliviously. Callees
are cloned into the unit (one clone per reachable function) so rewriting
never mutates the original program. Profiles weight blocks by loop nesting
(``loop_weight`` per level, natural-loop analysis) and by call depth (x2
per level), since those blocks dominate runtime cost.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

from .lowering import LoweredBlock, lower_function
from .parser import Function, Program


class ExternalCall(Exception):
    """Raised for calls leaving the program; those cannot run obliviously."""


class RecursionLimit(Exception):
    pass


@dataclass(frozen=True)
class BlockProfile:
    key: tuple[str, str]
    class_seq: tuple[str, ...]
    weight: float

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError("profile weight must be >= 1")


@dataclass
class CallTreeUnit:
    root: str
    functions: dict[str, Function]          # root plus cloned callees
    call_depth: dict[str, int]              # function -> depth under root
    program: Program
    root_called_internally: bool = False
    lowered: dict[str, list[LoweredBlock]] = field(default_factory=dict)

    @property
    def max_call_depth(self) -> int:
        return max(self.call_depth.values(), default=0)

    def slab_entries(self) -> int:
        # One pending return id per call level, plus the halt sentinel when
        # the root's own returns go through the shadow stack.
        extra = 1 if self.root_called_internally else 0
        return self.max_call_depth + extra

    def function_order(self) -> list[str]:
        return list(self.functions.keys())


def build_call_tree(prog: Program, root: str, max_depth: int = 32) -> CallTreeUnit:
    """Clone ``root`` and every transitively called internal function.

    Rejects calls to functions that are not part of the program and call
    graphs whose depth exceeds ``max_depth`` (cycles count as infinite).
    """
    if root not in prog.functions:
        raise ValueError(f"no function named {root!r}")
    if not prog.functions[root].protect:
        raise ValueError(f"function {root!r} is not marked @protect")

    depth: dict[str, int] = {root: 0}
    order = [root]
    stack = [(root, 0, (root,))]
    while stack:
        fname, d, path = stack.pop()
        for bb in prog.functions[fname].blocks:
            if bb.term.kind != "call":
                continue
            callee = bb.term.target
            if callee not in prog.functions:
                raise ExternalCall(
                    f"{fname!r} calls {callee!r}, which is outside the program"
                )
            if callee in path:
                raise RecursionLimit(f"recursive call cycle through {callee!r}")
            if d + 1 > max_depth:
                raise RecursionLimit(f"call depth exceeds {max_depth}")
            if callee not in depth or depth[callee] < d + 1:
                depth[callee] = max(depth.get(callee, 0), d + 1)
                if callee not in order:
                    order.append(callee)
                stack.append((callee, d + 1, path + (callee,)))

    functions = {name: copy.deepcopy(prog.functions[name]) for name in order}
    called = {
        bb.term.target
        for f in functions.values()
        for bb in f.blocks
        if bb.term.kind == "call"
    }
    return CallTreeUnit(
        root=root,
        functions=functions,
        call_depth=depth,
        program=prog,
        root_called_internally=root in called,
    )


def _successors(func: Function) -> list[list[int]]:
    idx = func.block_index()
    succ: list[list[int]] = []
    for bb in func.blocks:
        t = bb.term
        s = []
        if t.kind == "jmp":
            s = [idx[t.target]]
        elif t.kind == "cond":
            s = [idx[t.target], idx[t.fallthrough]]
        elif t.kind == "call":
            s = [idx[t.fallthrough]]
        succ.append(s)
    return succ


def _dominators(succ: list[list[int]]) -> list[set[int]]:
    n = len(succ)
    preds: list[list[int]] = [[] for _ in range(n)]
    for u, ss in enumerate(succ):
        for v in ss:
            preds[v].append(u)
    full = set(range(n))
    dom = [full.copy() for _ in range(n)]
    dom[0] = {0}
    changed = True
    while changed:
        changed = False
        for v in range(1, n):
            ps = [dom[p] for p in preds[v]]
            new = (set.intersection(*ps) if ps else set()) | {v}
            if new != dom[v]:
                dom[v] = new
                changed = True
    return dom


def loop_depths(func: Function) -> list[int]:
    """Natural-loop nesting depth per basic block.

    Back edges are found with the dominator test; each back edge u->h spans
    the blocks that reach u without passing h. Blocks on a cycle that has no
    back edge (irreducible flow) get depth 0 with a warning.
    """
    succ = _successors(func)
    n = len(succ)
    dom = _dominators(succ)
    preds: list[list[int]] = [[] for _ in range(n)]
    for u, ss in enumerate(succ):
        for v in ss:
            preds[v].append(u)

    depth = [0] * n
    loop_members: list[set[int]] = []
    for u in range(n):
        for h in succ[u]:
            if h in dom[u]:
                # Natural loop of back edge u->h: h plus everything reaching
                # u without passing h (the header is never expanded).
                body = {h, u}
                work = [u] if u != h else []
                while work:
                    x = work.pop()
                    for p in preds[x]:
                        if p not in body:
                            body.add(p)
                            work.append(p)
                loop_members.append(body)
    for body in loop_members:
        for b in body:
            depth[b] += 1

    in_cycle = _cycle_blocks(succ)
    irreducible = [b for b in in_cycle if depth[b] == 0]
    if irreducible:
        warnings.warn(
            f"irreducible control flow in {func.name!r}; affected blocks keep weight 1",
            stacklevel=2,
        )
    return depth


def _cycle_blocks(succ: list[list[int]]) -> set[int]:
    # Tarjan SCC; members of any non-trivial SCC (or self loops) sit on a cycle.
    n = len(succ)
    index = [0] * n
    low = [0] * n
    on = [False] * n
    seen = [False] * n
    stack: list[int] = []
    counter = [1]
    out: set[int] = set()

    def strongconnect(v0):
        work = [(v0, 0)]
        while work:
            v, pi = work[-1]
            if pi == 0:
                seen[v] = True
                index[v] = low[v] = counter[0]
                counter[0] += 1
                stack.append(v)
                on[v] = True
            recurse = False
            for i in range(pi, len(succ[v])):
                w = succ[v][i]
                if not seen[w]:
                    work[-1] = (v, i + 1)
                    work.append((w, 0))
                    recurse = True
                    break
                if on[w]:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on[w] = False
                    comp.append(w)
                    if w == v:
                        break
                if len(comp) > 1 or v in succ[v]:
                    out.update(comp)
            work.pop()
            if work:
                pv = work[-1][0]
                low[pv] = min(low[pv], low[v])

    for v in range(n):
        if not seen[v]:
            strongconnect(v)
    return out


def lower_unit(unit: CallTreeUnit, dummy_addr: int = 0) -> None:
    """Populate ``unit.lowered`` (idempotent)."""
    if unit.lowered:
        return
    for name, func in unit.functions.items():
        static = name == unit.root and not unit.root_called_internally
        unit.lowered[name] = lower_function(func, root_static_ret=static, dummy_addr=dummy_addr)


def profile(unit: CallTreeUnit, loop_weight: float = 8.0) -> list[BlockProfile]:
    """One weighted class profile per basic block of the unit.

    Class order matches the translated item order exactly, including
    ptradjust fixups and call/return shadow-stack plumbing, so pattern cost
    simulation and actual translation see the same streams.
    """
    if loop_weight < 1:
        raise ValueError("loop_weight must be >= 1")
    lower_unit(unit)
    profiles: list[BlockProfile] = []
    for name, func in unit.functions.items():
        depths = loop_depths(func)
        call_factor = 2 ** unit.call_depth[name]
        for bb, lowered, d in zip(func.blocks, unit.lowered[name], depths):
            weight = (loop_weight ** d) * call_factor
            seq = tuple(item.tag for item in lowered.items)
            profiles.append(BlockProfile(lowered.key, seq, max(1.0, weight)))
    return profiles
