"""Bundled sample programs for tests, benchmarks and CLI experiments."""

from importlib import resources

SAMPLES = ("modexp", "matmul", "tablelookup")


def sample_source(name: str) -> str:
    if name not in SAMPLES:
        raise KeyError(f"no bundled sample {name!r} (have {', '.join(SAMPLES)})")
    return resources.files(__package__).joinpath(f"{name}.asm").read_text()
