"""Shared lowering of basic blocks into slot-class item sequences.

Both the cost estimator and the block translator consume the exact same
item stream, which is what makes simulated costs agree with the real
translation. Items carry the class tag used for slot placement plus enough
payload to materialize the final instruction:

  * plain ALU instructions lower to one class1/class2 item
  * ``leag`` lowers to class1 followed by a ptradjust fixup item
  * ``load``/``store`` lower to one memory item (expanded to an
    address-setup / controller-call / scratchpad-access slot triple later)
  * a ``call`` terminator contributes push-return-id plumbing (class1,
    store, class1) and a ``ret`` contributes pop plumbing (class1, load),
    except that returns from an internally uncalled root are compiled to a
    static halt and need no stack traffic
"""

from __future__ import annotations

from dataclasses import dataclass

from .isa import CLASS1, CLASS2, CSP, CTMP, Instruction, LOAD, PTRADJUST, RetTarget, STORE

# Placement tags; PTRADJUST items occupy class1 slots (identical latency).
PLACEABLE = (CLASS1, CLASS2, LOAD, STORE, PTRADJUST)


@dataclass(frozen=True)
class Item:
    tag: str                 # class1 | class2 | load | store | ptradjust
    ins: Instruction | None  # payload; None only for markers resolved later
    role: str = "app"        # app | fixup | push | pop


@dataclass(frozen=True)
class LoweredBlock:
    key: tuple[str, str]     # (function, block label)
    items: tuple[Item, ...]
    term: object             # parser.Terminator
    static_halt: bool        # ret compiled to a constant halt target


def slot_tag_of(ins: Instruction) -> str:
    return ins.opcode.iclass


def lower_block(func_name: str, bb, *, root_static_ret: bool, dummy_addr: int) -> LoweredBlock:
    """Lower one basic block of a call-tree unit into placement items."""
    items: list[Item] = []
    for ins in bb.instrs:
        tag = slot_tag_of(ins)
        items.append(Item(tag, ins))
        if ins.op == "leag":
            # Scratchpad-relative addresses need the fixup right after the
            # address-forming instruction.
            items.append(Item(PTRADJUST, Instruction("ptradjust", (ins.args[0],)), "fixup"))

    term = bb.term
    static_halt = False
    if term.kind == "call":
        ret_target = RetTarget((func_name, term.fallthrough))
        items.append(Item(CLASS1, Instruction("movi", (CTMP, ret_target)), "push"))
        items.append(Item(STORE, Instruction("store", (CSP, 0, CTMP)), "push"))
        items.append(Item(CLASS1, Instruction("lea", (CSP, CSP, 8)), "push"))
    elif term.kind == "ret":
        if root_static_ret:
            static_halt = True
        else:
            items.append(Item(CLASS1, Instruction("lea", (CSP, CSP, -8)), "pop"))
            items.append(Item(LOAD, Instruction("load", (CTMP, CSP, 0)), "pop"))
    return LoweredBlock((func_name, bb.label), tuple(items), term, static_halt)


def lower_function(func, *, root_static_ret: bool, dummy_addr: int) -> list[LoweredBlock]:
    return [
        lower_block(func.name, bb, root_static_ret=root_static_ret, dummy_addr=dummy_addr)
        for bb in func.blocks
    ]
