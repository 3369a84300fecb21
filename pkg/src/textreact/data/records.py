"""Corpus and reaction-record types plus their JSONL readers/writers."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

from ..chem import SmilesError, parse_smiles
from ..errors import TextReactError

logger = logging.getLogger(__name__)

SLOTS = ("catalyst", "solvent1", "solvent2", "reagent1", "reagent2")
NONE = "NONE"


class MalformedLine(TextReactError, ValueError):
    def __init__(self, path, lineno: int, reason: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


class DuplicateId(TextReactError, ValueError):
    pass


class UnparseableSmiles(TextReactError, ValueError):
    def __init__(self, record_id: str, smiles: str, cause: Exception):
        self.record_id = record_id
        super().__init__(f"record {record_id}: cannot parse {smiles!r} ({cause})")


@dataclass(frozen=True)
class Paragraph:
    id: str
    text: str
    year: int


class Corpus:
    """Ordered paragraphs with an id lookup.

    ``sources`` optionally maps paragraph id -> (reactants, product) of the
    reaction the paragraph describes; only synthetic data provides it.
    """

    def __init__(self, paragraphs: Iterable[Paragraph], sources: dict | None = None):
        self.paragraphs: list[Paragraph] = list(paragraphs)
        self.index: dict[str, int] = {}
        for row, p in enumerate(self.paragraphs):
            if p.id in self.index:
                raise DuplicateId(f"duplicate paragraph id {p.id!r}")
            if not p.text:
                raise ValueError(f"paragraph {p.id!r} has empty text")
            self.index[p.id] = row
        self.sources = sources or {}

    def __len__(self) -> int:
        return len(self.paragraphs)

    def __iter__(self) -> Iterator[Paragraph]:
        return iter(self.paragraphs)

    def __contains__(self, pid: str) -> bool:
        return pid in self.index

    def __getitem__(self, pid: str) -> Paragraph:
        return self.paragraphs[self.index[pid]]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.paragraphs]

    def subset(self, keep) -> "Corpus":
        kept = [p for p in self.paragraphs if keep(p)]
        return Corpus(kept, {k: v for k, v in self.sources.items() if k in {p.id for p in kept}})


@dataclass(frozen=True)
class ConditionSet:
    catalyst: str = NONE
    solvent1: str = NONE
    solvent2: str = NONE
    reagent1: str = NONE
    reagent2: str = NONE

    def as_tuple(self) -> tuple[str, ...]:
        return tuple(getattr(self, s) for s in SLOTS)

    @classmethod
    def from_tuple(cls, values: Sequence[str]) -> "ConditionSet":
        return cls(*values)


@dataclass(frozen=True)
class Center:
    kind: str  # "atom" or "bond"
    atom_a: int
    atom_b: int | None = None

    @property
    def atoms(self) -> tuple[int, ...]:
        return (self.atom_a,) if self.atom_b is None else (self.atom_a, self.atom_b)


@dataclass(frozen=True)
class RetroLabel:
    reactants: tuple[str, ...]
    template_id: int | None = None
    center: Center | None = None


Label = Union[ConditionSet, RetroLabel]


@dataclass
class ReactionRecord:
    id: str
    reactants: tuple[str, ...]
    product: str
    label: Label
    text_id: str | None
    year: int
    paired: bool = True

    @property
    def task(self) -> str:
        return "rcr" if isinstance(self.label, ConditionSet) else "retro"


@dataclass
class Dataset:
    records: list[ReactionRecord]
    task: str
    # generator-side annotations, e.g. the latent reaction type of synthetic records
    meta: dict = field(default_factory=dict)
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {}
        for i, r in enumerate(self.records):
            if r.id in self.index:
                raise DuplicateId(f"duplicate reaction id {r.id!r}")
            self.index[r.id] = i

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, rid: str) -> ReactionRecord:
        return self.records[self.index[rid]]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def select(self, ids: Iterable[str]) -> list[ReactionRecord]:
        return [self[i] for i in ids]


def _iter_json(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedLine(path, lineno, "expected a JSON object")
            yield lineno, obj


def load_corpus(path) -> Corpus:
    paragraphs = []
    seen = set()
    for lineno, obj in _iter_json(path):
        missing = [k for k in ("id", "text", "year") if k not in obj]
        if missing:
            raise MalformedLine(path, lineno, f"missing field(s) {missing}")
        if not isinstance(obj["year"], int) or not isinstance(obj["text"], str) or not obj["text"]:
            raise MalformedLine(path, lineno, "year must be an integer and text a non-empty string")
        pid = str(obj["id"])
        if pid in seen:
            raise DuplicateId(f"{path}:{lineno}: duplicate paragraph id {pid!r}")
        seen.add(pid)
        paragraphs.append(Paragraph(pid, obj["text"], obj["year"]))
    return Corpus(paragraphs)


def _check_smiles(rid: str, smiles: str) -> None:
    try:
        parse_smiles(smiles)
    except SmilesError as exc:
        raise UnparseableSmiles(rid, smiles, exc) from None


def _parse_center(path, lineno, obj, n_atoms: int) -> Center | None:
    raw = obj.get("center")
    if raw is None:
        return None
    kind, atoms = raw.get("kind"), raw.get("atoms")
    if kind not in ("atom", "bond") or not isinstance(atoms, list) or len(atoms) != (1 if kind == "atom" else 2):
        raise MalformedLine(path, lineno, f"bad center {raw!r}")
    if any(not isinstance(a, int) or not 0 <= a < n_atoms for a in atoms):
        raise MalformedLine(path, lineno, f"center atoms {atoms} out of range for {n_atoms} product atoms")
    if kind == "atom":
        return Center("atom", atoms[0])
    a, b = sorted(atoms)
    return Center("bond", a, b)


def load_reactions(path, task: str, corpus: Corpus | None = None) -> Dataset:
    """Read rcr or retro JSONL.  Records whose text_id is absent from ``corpus`` are kept but flagged unpaired."""
    if task not in ("rcr", "retro"):
        raise ValueError(f"unknown task {task!r}")
    records = []
    for lineno, obj in _iter_json(path):
        required = ["id", "product", "reactants", "year"] + (["conditions"] if task == "rcr" else [])
        missing = [k for k in required if k not in obj]
        if missing:
            raise MalformedLine(path, lineno, f"missing field(s) {missing}")
        rid = str(obj["id"])
        reactants = obj["reactants"]
        if not isinstance(reactants, list) or not reactants or not all(isinstance(r, str) for r in reactants):
            raise MalformedLine(path, lineno, "reactants must be a non-empty list of strings")
        if not isinstance(obj["year"], int):
            raise MalformedLine(path, lineno, "year must be an integer")
        for smi in [*reactants, obj["product"]]:
            _check_smiles(rid, smi)
        if task == "rcr":
            cond = obj["conditions"]
            if not isinstance(cond, dict):
                raise MalformedLine(path, lineno, "conditions must be an object")
            unknown = set(cond) - set(SLOTS)
            if unknown:
                raise MalformedLine(path, lineno, f"unknown condition slot(s) {sorted(unknown)}")
            label: Label = ConditionSet(*[cond.get(s) or NONE for s in SLOTS])
        else:
            template_id = obj.get("template_id")
            n_atoms = len(parse_smiles(obj["product"]).atoms)
            center = _parse_center(path, lineno, obj, n_atoms)
            if (template_id is None) != (center is None):
                raise MalformedLine(path, lineno, "template_id and center must be given together")
            label = RetroLabel(tuple(reactants), template_id, center)
        text_id = obj.get("text_id")
        paired = text_id is not None and (corpus is None or text_id in corpus)
        records.append(ReactionRecord(rid, tuple(reactants), obj["product"], label, text_id, obj["year"], paired))
    n_unpaired = sum(not r.paired for r in records)
    if n_unpaired:
        logger.info("%s: %d of %d records are unpaired", path, n_unpaired, len(records))
    return Dataset(records, task)


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=True, separators=(", ", ": "))


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus:
            fh.write(_dumps({"id": p.id, "text": p.text, "year": p.year}) + "\n")


def record_to_json(r: ReactionRecord) -> dict:
    if isinstance(r.label, ConditionSet):
        return {
            "id": r.id,
            "reactants": list(r.reactants),
            "product": r.product,
            "conditions": dict(zip(SLOTS, r.label.as_tuple())),
            "text_id": r.text_id,
            "year": r.year,
        }
    obj = {"id": r.id, "product": r.product, "reactants": list(r.reactants)}
    if r.label.center is not None:
        obj["template_id"] = r.label.template_id
        obj["center"] = {"kind": r.label.center.kind, "atoms": list(r.label.center.atoms)}
    obj["text_id"] = r.text_id
    obj["year"] = r.year
    return obj


def save_reactions(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset:
            fh.write(_dumps(record_to_json(r)) + "\n")


def load_templates(path) -> dict[int, dict[str, list[str]]]:
    """templates.jsonl: {"template_id", "expansion": {product SMILES: [reactants]}}"""
    table: dict[int, dict[str, list[str]]] = {}
    for lineno, obj in _iter_json(path):
        if "template_id" not in obj or not isinstance(obj.get("expansion", {}), dict):
            raise MalformedLine(path, lineno, "expected template_id and an expansion object")
        table.setdefault(int(obj["template_id"]), {}).update(obj.get("expansion", {}))
    return table


def save_templates(table: dict[int, dict[str, list[str]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(table):
            fh.write(_dumps({"template_id": tid, "expansion": table[tid]}) + "\n")


def load_sources(path) -> dict[str, tuple[tuple[str, ...], str]]:
    out = {}
    for lineno, obj in _iter_json(path):
        try:
            out[obj["id"]] = (tuple(obj["reactants"]), obj["product"])
        except KeyError as exc:
            raise MalformedLine(path, lineno, f"missing field {exc}") from None
    return out


def save_sources(sources: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, (reactants, product) in sources.items():
            fh.write(_dumps({"id": pid, "reactants": list(reactants), "product": product}) + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
