"""Shared token vocabulary (SMILES and text) and per-slot condition vocabularies.

Special ids, fixed:

    0 [PAD]  1 [UNK]  2 [CLS]  3 [SEP]  4 [MASK]  5 [BOS]  6 [EOS]  7 [RXN]  8 [NUM]
    9..18    [NB0] .. [NB9]   (neighbour markers)

``[RXN]`` separates reactants from product in reaction inputs; ``[NUM]``
replaces free-standing numbers in text.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

from ..chem import SmilesError, parse_smiles, tokenize_smiles
from .records import NONE, SLOTS, ConditionSet, Corpus, ReactionRecord

CORE_SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]", "[RXN]", "[NUM]")
MAX_NEIGHBORS = 10
NB_TOKENS = tuple(f"[NB{j}]" for j in range(MAX_NEIGHBORS))
SPECIALS = CORE_SPECIALS + NB_TOKENS

PAD, UNK, CLS, SEP, MASK, BOS, EOS, RXN, NUM = range(len(CORE_SPECIALS))
NB0 = len(CORE_SPECIALS)

SLOT_UNK = "[UNK]"
SLOT_SPECIALS = (NONE, SLOT_UNK)  # NONE is id 0 in every slot vocabulary

_SMILES_HINT = re.compile(r"[A-Z0-9\[\]=#()]")
_WORD_PIECES = re.compile(r"[a-z]+|\d+(?:\.\d+)?|[^\sa-z\d]")
_TRAILING = ".,;:!?"


@lru_cache(maxsize=65536)
def _smiles_chunk(chunk: str) -> tuple[str, ...] | None:
    if not _SMILES_HINT.search(chunk):
        return None
    try:
        parse_smiles(chunk)
    except SmilesError:
        return None
    return tuple(t.text for t in tokenize_smiles(chunk))


def tokenize_text(text: str) -> list[str]:
    """Whitespace chunks; chunks that parse as SMILES are split into SMILES tokens,
    everything else is lowercased and split into words/punctuation."""
    out: list[str] = []
    for chunk in text.split():
        trail = []
        while len(chunk) > 1 and chunk[-1] in _TRAILING:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        pieces = _smiles_chunk(chunk)
        if pieces is not None:
            out.extend(pieces)
        else:
            for piece in _WORD_PIECES.findall(chunk.lower()):
                out.append("[NUM]" if piece[0].isdigit() else piece)
        out.extend(reversed(trail))
    return out


def smiles_tokens(smiles: str) -> list[str]:
    return [t.text for t in tokenize_smiles(smiles)]


def chem_input_tokens(record: ReactionRecord, reactants=None, product=None) -> list[str]:
    """RCR input is ``reactants [RXN] product``; retro input is the product alone."""
    product = product if product is not None else record.product
    if record.task == "retro":
        return smiles_tokens(product)
    reactants = reactants if reactants is not None else record.reactants
    return smiles_tokens(".".join(reactants)) + ["[RXN]"] + smiles_tokens(product)


def retro_target_tokens(reactants: Sequence[str]) -> list[str]:
    return smiles_tokens(".".join(reactants))


@dataclass
class Vocabs:
    tokens: list[str]
    slots: list[list[str]] = field(default_factory=lambda: [list(SLOT_SPECIALS) for _ in SLOTS])
    n_templates: int = 0
    index: dict[str, int] = field(init=False, repr=False)
    slot_index: list[dict[str, int]] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("token vocabulary must start with the fixed specials")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.slot_index = [{v: i for i, v in enumerate(vs)} for vs in self.slots]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def encode_conditions(self, cond: ConditionSet) -> list[int]:
        return [idx.get(v, 1) for idx, v in zip(self.slot_index, cond.as_tuple())]

    def decode_conditions(self, ids: Sequence[int]) -> ConditionSet:
        return ConditionSet(*[vs[i] for vs, i in zip(self.slots, ids)])

    @property
    def slot_sizes(self) -> list[int]:
        return [len(vs) for vs in self.slots]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.tokens, "slots": self.slots, "n_templates": self.n_templates}, fh)

    @classmethod
    def load(cls, path) -> "Vocabs":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(obj["tokens"], obj["slots"], obj["n_templates"])


def build_vocabs(train_records: Sequence[ReactionRecord], corpus: Corpus, min_freq: int = 1) -> Vocabs:
    """Token vocabulary from training chemistry (inputs and retro targets) and corpus text;
    slot vocabularies and template count from training labels only."""
    if not train_records or not len(corpus):
        raise ValueError("build_vocabs needs training records and a corpus")
    counts: Counter[str] = Counter()
    slot_counts = [Counter() for _ in SLOTS]
    n_templates = 0
    for r in train_records:
        counts.update(chem_input_tokens(r))
        if isinstance(r.label, ConditionSet):
            for c, v in zip(slot_counts, r.label.as_tuple()):
                c[v] += 1
        else:
            counts.update(retro_target_tokens(r.reactants))
            if r.label.template_id is not None:
                n_templates = max(n_templates, r.label.template_id + 1)
    for p in corpus:
        counts.update(tokenize_text(p.text))
    kept = sorted(t for t, c in counts.items() if c >= min_freq and t not in SPECIALS)
    slots = [list(SLOT_SPECIALS) + sorted(v for v in c if v not in SLOT_SPECIALS) for c in slot_counts]
    return Vocabs(list(SPECIALS) + kept, slots, n_templates)
