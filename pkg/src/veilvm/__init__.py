"""veilvm: a dynamic-obfuscation toolkit for a small virtual ISA.

Programs are rewritten into uniform, attacker-indistinguishable code blocks
and executed through oblivious code/data controllers in a simulated trusted
environment; a built-in adversary simulator measures whether each
protection variant actually holds up under single-stepping and ciphertext
observation.
"""

__version__ = "0.1.0"

from .parser import parse_program, print_program, Program
from .interp import interpret
from .profiler import build_call_tree, profile
from .patterngen import BlockPattern, brute_force, estimate_cost, genetic_search, parse_pattern
from .rewriter import translate, VARIANTS
from .engine import Engine, EngineConfig
from .sidechannel import abba_benchmark, classify, distinguish_blocks, welch_t

__all__ = [
    "parse_program", "print_program", "Program", "interpret",
    "build_call_tree", "profile",
    "BlockPattern", "brute_force", "estimate_cost", "genetic_search", "parse_pattern",
    "translate", "VARIANTS",
    "Engine", "EngineConfig",
    "abba_benchmark", "classify", "distinguish_blocks", "welch_t",
    "__version__",
]
