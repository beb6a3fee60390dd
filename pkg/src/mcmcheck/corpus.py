"""Access to the bundled corpus of programs, models, and expectations."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .lang import BoundsConfig, expand_macros, parse_program
from .mcm import parse_mcm


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    program_file: str
    model_file: str
    suprema: tuple[int, ...]
    expected: str
    heavy: bool


def corpus_text(filename: str) -> str:
    return (resources.files("mcmcheck") / "corpus" / filename).read_text()


def load_manifest() -> list[CorpusEntry]:
    entries = []
    for raw in corpus_text("manifest.txt").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, prog, model, sups, expected, flags = line.split()
        entries.append(CorpusEntry(
            name=name,
            program_file=prog,
            model_file=model,
            suprema=tuple(int(s) for s in sups.split(",")),
            expected=expected,
            heavy=flags == "heavy"))
    return entries


def load_case(entry: CorpusEntry):
    """Parsed (program, model, bounds) for one manifest entry."""
    program = parse_program(expand_macros(corpus_text(entry.program_file)))
    spec = parse_mcm(corpus_text(entry.model_file))
    if len(entry.suprema) != program.n:
        raise ValueError(f"{entry.name}: {len(entry.suprema)} suprema "
                         f"for {program.n} processes")
    return program, spec, BoundsConfig(entry.suprema)


def entry_named(name: str) -> CorpusEntry:
    for entry in load_manifest():
        if entry.name == name:
            return entry
    raise KeyError(f"no corpus entry named {name!r}")
