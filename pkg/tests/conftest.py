import pytest

from veilvm import build_call_tree, genetic_search, parse_program, profile, translate
from veilvm.patterngen import SearchCaps
from veilvm.rewriter import PATTERN_VARIANTS
from veilvm.samples import sample_source

FAST_CAPS = SearchCaps(generations=200, stall_generations=40)

_ROOTS = {"modexp": "modexp", "matmul": "matmul", "tablelookup": "encode"}
_cache: dict = {}


def sample_program(name):
    key = ("prog", name)
    if key not in _cache:
        _cache[key] = parse_program(sample_source(name))
    return _cache[key]


def sample_unit(name):
    key = ("unit", name)
    if key not in _cache:
        _cache[key] = build_call_tree(sample_program(name), _ROOTS[name])
    return _cache[key]


def sample_pattern(name, slots=20, seed=3):
    key = ("pattern", name, slots, seed)
    if key not in _cache:
        _cache[key] = genetic_search(slots, profile(sample_unit(name)), FAST_CAPS, seed=seed)
    return _cache[key]


def compiled(name, variant, seed=0):
    key = ("tr", name, variant, seed)
    if key not in _cache:
        pat = sample_pattern(name) if variant in PATTERN_VARIANTS else None
        _cache[key] = translate(sample_unit(name), pat, variant, seed=seed)
    return _cache[key]


@pytest.fixture
def modexp_prog():
    return sample_program("modexp")


@pytest.fixture
def modexp_unit():
    return sample_unit("modexp")
