"""Command line front end: compile, run, attack, bench, classify.

Artifacts are plain text or CSV, figures are PNG, and every command is
reproducible from its manifest plus seeds (the resolved manifest is written
next to the compile outputs). Program arguments accept a file path or
``sample:NAME`` for the bundled corpus; the default seed comes from
``VEILVM_SEED`` when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import report
from .engine import Engine, EngineConfig
from .interp import interpret
from .isa import ClassLatency, LatencyModel, default_latency_model, REG_COUNT
from .parser import parse_program
from .patterngen import (
    BlockPattern,
    SearchCaps,
    SearchSpaceTooLarge,
    TAG_WIDTH,
    brute_force,
    estimate_cost,
    genetic_search,
    mandatory_classes,
    parse_pattern,
)
from .profiler import build_call_tree, profile
from .rewriter import (
    PATTERN_VARIANTS,
    VARIANTS,
    format_listing,
    structural_scan,
    translate,
)
from .samples import sample_source
from .sidechannel import (
    T_THRESHOLD,
    classify,
    distinguish_blocks,
    sample_latencies,
    welch_t,
)


def default_seed() -> int:
    return int(os.environ.get("VEILVM_SEED", "0"))


@dataclass
class RunManifest:
    """Everything needed to reproduce a pipeline run byte for byte."""

    program: str
    variant: str = "IV-AlignedPattern"
    slots: int = 20
    seed: int = 0
    loop_weight: float = 8.0
    store_weight: float = 2.0
    pattern: str | None = None
    gen_cap: int = 10_000
    time_cap: float = 10.0
    top_k: int = 15
    stall_cap: int = 150
    brute: bool = False
    data_backend: str = "linear"
    code_compress: bool = True
    lazy_data: bool = False

    def caps(self) -> SearchCaps:
        return SearchCaps(self.gen_cap, self.time_cap, self.top_k, self.stall_cap)

    @classmethod
    def from_json(cls, path: str) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def load_program_text(spec: str) -> str:
    if spec.startswith("sample:"):
        return sample_source(spec.split(":", 1)[1])
    return Path(spec).read_text()


def _compile_pipeline(man: RunManifest):
    prog = parse_program(load_program_text(man.program))
    roots = [f.name for f in prog.functions.values() if f.protect]
    if not roots:
        raise SystemExit("error: no protected roots (mark a function with @protect)")
    unit = build_call_tree(prog, roots[0])
    profiles = profile(unit, man.loop_weight)
    pattern = None
    cost = None
    if man.variant in PATTERN_VARIANTS:
        if man.pattern:
            pattern = parse_pattern(man.pattern, man.slots)
        elif man.brute:
            pattern = brute_force(man.slots, profiles, man.store_weight)
        else:
            free = man.slots - 4 - sum(TAG_WIDTH[t] for t in mandatory_classes(profiles))
            try:
                if 4 ** max(free, 0) <= 10 ** 6:
                    pattern = brute_force(man.slots, profiles, man.store_weight)
            except SearchSpaceTooLarge:
                pattern = None
            if pattern is None:
                pattern = genetic_search(man.slots, profiles, man.caps(), man.seed,
                                         man.store_weight)
        cost = estimate_cost(pattern, profiles, man.store_weight)
    tr = translate(unit, pattern, man.variant, man.seed)
    return prog, unit, profiles, pattern, cost, tr


def cmd_compile(args) -> int:
    man = _manifest_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prog, unit, profiles, pattern, cost, tr = _compile_pipeline(man)

    (out / "manifest.json").write_text(json.dumps(asdict(man), indent=2) + "\n")
    (out / "blocks.txt").write_text(format_listing(tr))
    if pattern is not None:
        (out / "pattern.txt").write_text(pattern.format() + "\n")
        report.write_csv(
            out / "cost.csv",
            ["function", "block", "weight", "blocks", "dummy_loads", "dummy_stores", "cost"],
            [[e.key[0], e.key[1], e.weight, e.blocks, e.dummy_loads, e.dummy_stores, e.cost]
             for e in cost.entries] + [["total", "", "", "", "", "", cost.total]],
        )
    issues = structural_scan(tr)
    if issues:
        for line in issues:
            print("uniformity violation:", line, file=sys.stderr)
        return 1
    print(f"compiled {man.program} [{man.variant}]: {len(tr.blocks)} blocks -> {out}")
    if pattern is not None:
        print(f"pattern: {pattern.format()} (cost {cost.total:g})")
    return 0


def _parse_presets(args):
    regs = {}
    for item in args.set or []:
        name, _, value = item.partition("=")
        if not name.startswith("r") or not name[1:].isdigit() or int(name[1:]) >= REG_COUNT:
            raise SystemExit(f"error: bad register {name!r}")
        regs[int(name[1:])] = int(value, 0)
    mem = {}
    for item in args.set_mem or []:
        name, _, value = item.partition("=")
        mem[name] = bytes.fromhex(value)
    return regs, mem


def cmd_run(args) -> int:
    man = _manifest_from_args(args)
    regs, mem = _parse_presets(args)
    prog, unit, profiles, pattern, cost, tr = _compile_pipeline(man)
    cfg = EngineConfig(
        variant=man.variant, seed=man.seed, code_compress=man.code_compress,
        data_backend=man.data_backend, lazy_data_init=man.lazy_data,
        trace="full" if args.trace else "summary",
        sample_latencies=bool(args.trace),
    )
    eng = Engine(tr, cfg, mem or None)
    res = eng.run(regs or None)
    state = res.state
    print(f"halted after {res.trace.code_fetches} block fetches, "
          f"{res.trace.retired} retired instructions")
    for i, v in enumerate(state.regs):
        marker = " *" if i in prog.outputs else ""
        print(f"  r{i} = {v:#x}{marker}")
    print(f"  flags z={int(state.fz)} s={int(state.fs)} c={int(state.fc)}")
    for name, _, size in tr.layout.objects:
        data = eng.final_objects()[name]
        print(f"  {name}[{size}] = {data.hex()}")
    if args.trace:
        view = res.trace.debug_text() if args.trace_view == "debug" else res.trace.attacker_text()
        Path(args.trace).write_text(view)
        print(f"trace written to {args.trace}")
    return 0


def cmd_attack(args) -> int:
    man = _manifest_from_args(args)
    regs, mem = _parse_presets(args)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    prog, unit, profiles, pattern, cost, tr = _compile_pipeline(man)
    cfg = EngineConfig(variant=man.variant, seed=man.seed,
                       rotate_code=None if not args.no_rotation else False)
    eng = Engine(tr, cfg, mem or None)
    res = eng.run(regs or None)

    targets = args.target_blocks.split(",")
    if len(targets) != 2:
        raise SystemExit("error: --target-blocks expects LABEL_A,LABEL_B")
    rep = distinguish_blocks(tr, res.trace, eng, targets[0], targets[1],
                             args.executions, seed=man.seed)

    lines = [
        f"variant: {rep.variant}",
        f"executions: {rep.n_executions}",
        f"targets: {targets[0]} vs {targets[1]}",
        "",
        f"count attack: retired {rep.count_a} vs {rep.count_b} -> "
        f"{'DISTINGUISHABLE' if rep.count_attack else 'indistinguishable'}",
        f"latency attack: {len(rep.flagged_slots)} slot(s) with |t| >= {rep.threshold}"
        f" -> {'DISTINGUISHABLE' if rep.latency_attack else 'indistinguishable'}",
        f"  flagged slots: {', '.join(map(str, rep.flagged_slots)) or '-'}",
        f"ciphertext attack: accuracy {rep.ciphertext.accuracy:.4f}"
        f" (chance {rep.ciphertext.chance:.4f}), first reuse at execution"
        f" {rep.ciphertext.reuse_at}, tags injective: {rep.ciphertext.injective}"
        f" -> {'DISTINGUISHABLE' if rep.ciphertext.succeeds else 'at chance'}",
        "",
        f"succeeding attacks: {', '.join(sorted(rep.succeeded())) or 'none'}",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")

    report.write_csv(out / "slot_t.csv", ["slot", "t", "flagged"],
                     [[i, f"{t:.6f}", int(abs(t) >= rep.threshold)]
                      for i, t in enumerate(rep.slot_t)])
    report.write_csv(out / "counts.csv", ["target", "retired"],
                     [[targets[0], rep.count_a], [targets[1], rep.count_b]])
    report.write_csv(out / "ciphertext.csv",
                     ["accuracy", "chance", "reuse_at", "injective", "block_types"],
                     [[f"{rep.ciphertext.accuracy:.6f}", f"{rep.ciphertext.chance:.6f}",
                       rep.ciphertext.reuse_at, int(rep.ciphertext.injective),
                       rep.ciphertext.n_block_types]])

    report.slot_t_figure(rep.slot_t, rep.threshold, out / "slot_t.png",
                         title=f"{man.variant}: per-slot |t| ({targets[0]} vs {targets[1]})")
    report.count_figure({targets[0]: rep.count_a, targets[1]: rep.count_b},
                        out / "counts.png")
    # Histogram + progression for the most leaking slot.
    import numpy as np

    from .sidechannel import build_skeleton

    ske = build_skeleton(tr, res.trace, eng)
    a_id = tr.first_block[_target_key(tr, targets[0])]
    b_id = tr.first_block[_target_key(tr, targets[1])]
    worst = int(np.argmax(np.abs(np.nan_to_num(rep.slot_t)))) if len(rep.slot_t) else 0
    rng = np.random.default_rng(man.seed + 99)
    sa = sample_latencies(ske.block_retires[a_id], args.executions, rng=rng)[:, worst]
    sb = sample_latencies(ske.block_retires[b_id], args.executions, rng=rng)[:, worst]
    report.histogram_figure(sa, sb, targets, out / "latency_hist.png",
                            title=f"slot {worst} latency")
    prog_result = welch_t(sa, sb)
    report.progression_figure({f"slot {worst}": prog_result.progression},
                              rep.threshold, out / "t_progression.png")
    print("\n".join(lines))
    print(f"report -> {out}")
    return 0


def _target_key(tr, target: str):
    if "." in target:
        f, lbl = target.split(".", 1)
        return (f, lbl)
    return (tr.unit.root, target)


def cmd_bench(args) -> int:
    man = _manifest_from_args(args)
    regs, mem = _parse_presets(args)
    out = Path(args.metrics)
    out.parent.mkdir(parents=True, exist_ok=True)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = []
    header = ["variant", "repetitions", "retired", "code_fetches", "code_touches",
              "data_accesses", "data_touches", "counter_writes", "oram_touches",
              "dummy_accesses", "real_accesses"]
    if args.repetitions > 0:
        for variant in variants:
            vman = RunManifest(**{**asdict(man), "variant": variant,
                                  "pattern": man.pattern if variant in PATTERN_VARIANTS else None})
            prog, unit, profiles, pattern, cost, tr = _compile_pipeline(vman)
            acc = dict.fromkeys(header[2:], 0)
            for rep_i in range(args.repetitions):
                cfg = EngineConfig(variant=variant, seed=man.seed + rep_i,
                                   data_backend=man.data_backend)
                eng = Engine(tr, cfg, mem or None)
                res = eng.run(regs or None)
                t = res.trace
                acc["retired"] += t.retired
                acc["code_fetches"] += t.code_fetches
                acc["code_touches"] += t.code_touches
                acc["data_accesses"] += t.data_accesses
                acc["data_touches"] += t.data_touches
                acc["counter_writes"] += t.counter_writes
                acc["oram_touches"] += t.code_touches + t.data_touches + t.counter_writes
                acc["dummy_accesses"] += t.dummy_data_accesses
                acc["real_accesses"] += t.real_data_accesses
            rows.append({"variant": variant, "repetitions": args.repetitions,
                         **{k: v / args.repetitions for k, v in acc.items()}})
    report.write_csv(out, header, [[r[h] for h in header] for r in rows])
    if rows:
        report.bench_figure(rows, out.with_suffix(".png"))
        for r in rows:
            print(f"{r['variant']:20s} oram_touches={r['oram_touches']:.0f} "
                  f"dummy={r['dummy_accesses']:.0f} retired={r['retired']:.0f}")
    print(f"metrics -> {out}")
    return 0


def _load_model(args) -> LatencyModel:
    model = default_latency_model()
    if getattr(args, "model_json", None):
        spec = json.loads(Path(args.model_json).read_text())
        classes = dict(model.classes)
        for key, params in spec.get("classes", {}).items():
            classes[key] = ClassLatency(**params)
        overrides = {op: ClassLatency(**params)
                     for op, params in spec.get("overrides", {}).items()}
        model = LatencyModel(classes=classes, overrides=overrides,
                             div_operand_leak=spec.get("div_operand_leak", False),
                             alignment_penalty=spec.get("alignment_penalty", 0.0))
    return model


def cmd_classify(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args)
    result = classify(n=args.samples, threshold=args.threshold, model=model,
                      seed=args.seed)
    lines = []
    for i, cls in enumerate(result.classes, start=1):
        lines.append(f"class {i}: {' '.join(cls)}")
    for w in result.warnings:
        lines.append(f"warning: {w}")
    (out / "classes.txt").write_text("\n".join(lines) + "\n")
    report.write_csv(out / "t_matrix.csv", ["op1", "op2", "t"],
                     [[a, b, f"{t:.6f}"] for (a, b), t in sorted(result.t_matrix.items())])
    ops = sorted({o for pair in result.t_matrix for o in pair})
    report.tmatrix_figure(ops, result.t_matrix, args.threshold, out / "t_matrix.png")
    print("\n".join(lines))
    print(f"classification -> {out}")
    return 0


def _manifest_from_args(args) -> RunManifest:
    if getattr(args, "manifest", None):
        man = RunManifest.from_json(args.manifest)
        if getattr(args, "variant", None):
            man.variant = args.variant
        return man
    man = RunManifest(
        program=args.program,
        variant=args.variant,
        slots=args.slots,
        seed=args.seed,
        loop_weight=args.loop_weight,
        store_weight=args.store_weight,
        pattern=args.pattern,
        gen_cap=args.gen_cap,
        time_cap=args.time_cap,
        top_k=args.top_k,
        stall_cap=args.stall_cap,
        brute=args.brute_force,
        data_backend=args.data_oram,
        lazy_data=args.lazy_data,
    )
    if man.variant not in VARIANTS:
        raise SystemExit(f"error: unknown variant {man.variant!r} (choose from {', '.join(VARIANTS)})")
    return man


def _add_pipeline_args(p, needs_program=True):
    if needs_program:
        p.add_argument("program", nargs="?", help="program path or sample:NAME")
        p.add_argument("--manifest", help="load settings from a compile manifest")
    p.add_argument("--variant", default="IV-AlignedPattern", choices=VARIANTS)
    p.add_argument("--slots", type=int, default=20, help="code block slot count")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--loop-weight", type=float, default=8.0)
    p.add_argument("--store-weight", type=float, default=2.0)
    p.add_argument("--pattern", help="use this slot pattern instead of searching")
    p.add_argument("--gen-cap", type=int, default=10_000)
    p.add_argument("--time-cap", type=float, default=10.0)
    p.add_argument("--top-k", type=int, default=15)
    p.add_argument("--stall-cap", type=int, default=150)
    p.add_argument("--brute-force", action="store_true",
                   help="require the exhaustive pattern search")
    p.add_argument("--data-oram", default="linear", choices=["linear", "path"])
    p.add_argument("--lazy-data", action="store_true",
                   help="insert data objects on first touch (flags violations)")


def _add_preset_args(p):
    p.add_argument("--set", action="append", metavar="rN=VALUE",
                   help="preset a register (repeatable)")
    p.add_argument("--set-mem", action="append", metavar="NAME=HEX",
                   help="preset a global's contents (repeatable)")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="veilvm", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="translate a program into uniform blocks")
    _add_pipeline_args(p)
    p.add_argument("--out-dir", default="veilvm-out")
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("run", help="execute a program through the oblivious engine")
    _add_pipeline_args(p)
    _add_preset_args(p)
    p.add_argument("--trace", help="write an execution trace to this file")
    p.add_argument("--trace-view", default="attacker", choices=["attacker", "debug"])
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("attack", help="run the distinguishing attacks on two blocks")
    _add_pipeline_args(p)
    _add_preset_args(p)
    p.add_argument("--target-blocks", required=True, metavar="A,B")
    p.add_argument("--executions", type=int, default=10_000)
    p.add_argument("--no-rotation", action="store_true",
                   help="pin the code scratchpad even under the ciphertext variant")
    p.add_argument("--report", default="veilvm-attack")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("bench", help="count cost drivers per variant")
    _add_pipeline_args(p)
    _add_preset_args(p)
    p.add_argument("--variants", help="comma list (default: all)")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--metrics", default="veilvm-bench/metrics.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("classify", help="rebuild latency classes from the model")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--threshold", type=float, default=T_THRESHOLD)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--model-json", help="latency model overrides (JSON)")
    p.add_argument("--out-dir", default="veilvm-classify")
    p.set_defaults(fn=cmd_classify)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as e:  # pipeline diagnostics become a nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
