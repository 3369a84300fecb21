"""Desk-scale synthetic benchmark.

Each reaction has a latent type.  The type fixes the reaction class (which
functional handles react), a small pool of first fragments, and a condition
set.  The second fragment is drawn from all fragments.  The paragraph for a
reaction quotes its reactant/product SMILES and condition names, with
optional distractor sentences, so text carries the conditions verbatim while
SMILES only reveal the type through the first fragment.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import asdict, dataclass

from ..chem import parse_smiles
from ..errors import TextReactError
from .records import NONE, SLOTS, Center, ConditionSet, Corpus, Dataset, Paragraph, ReactionRecord, RetroLabel


class InvalidParams(TextReactError, ValueError):
    pass


CATALYSTS = ("palladium", "copper", "nickel", "platinum", "rhodium", "ruthenium", "iridium", "cobalt", "silver", "gold")
SOLVENTS = (
    "tetrahydrofuran", "dichloromethane", "methanol", "ethanol", "toluene", "acetonitrile", "dimethylformamide",
    "dioxane", "water", "acetone", "chloroform", "hexane", "benzene", "pyridine",
)
REAGENTS = (
    "triethylamine", "diisopropylethylamine", "pyrrolidine", "imidazole", "hydrazine", "borohydride", "carbonate",
    "bicarbonate", "hydroxide", "acetate", "triflate", "tosylate", "mesylate", "iodide", "fluoride", "periodinane",
)

_CORES = (
    "c1ccc({X})cc1", "c1cccc({X})c1", "c1ccc({X})nc1", "c1cnc({X})cc1", "c1csc({X})c1",
    "C1CCC({X})CC1", "C1CCN({X})CC1", "C1CC({X})C1",
)
_SUBSTITUENTS = ("F", "Cl", "Br", "C", "OC", "C(F)(F)F", "C#N", "N(C)C", "CC", "SC")
_PREFIXES = ("", "C", "CC")


@dataclass(frozen=True)
class ReactionClass:
    name: str
    reactants: tuple[str, ...]  # format strings over {f1}, {f2}
    product: str
    center_kind: str
    center_offsets: tuple[int, ...]  # relative to the atom count of f1


CLASSES = (
    ReactionClass("amide coupling", ("{f1}C(=O)O", "N{f2}"), "{f1}C(=O)N{f2}", "bond", (0, 2)),
    ReactionClass("esterification", ("{f1}C(=O)O", "O{f2}"), "{f1}C(=O)O{f2}", "bond", (0, 2)),
    ReactionClass("suzuki coupling", ("{f1}Br", "OB(O){f2}"), "{f1}{f2}", "bond", (-1, 0)),
    ReactionClass("reductive amination", ("{f1}C=O", "N{f2}"), "{f1}CN{f2}", "bond", (0, 1)),
    ReactionClass("etherification", ("{f1}CBr", "O{f2}"), "{f1}CO{f2}", "bond", (0, 1)),
    ReactionClass("sulfonylation", ("{f1}S(=O)(=O)Cl", "N{f2}"), "{f1}S(=O)(=O)N{f2}", "bond", (0, 3)),
    ReactionClass("deprotection", ("{f1}N({f2})C(=O)OC(C)(C)C",), "{f1}N{f2}", "atom", (0,)),
    ReactionClass("reduction", ("{f1}C(=O){f2}",), "{f1}C(O){f2}", "atom", (0,)),
)

_INTRO_TWO = (
    "To a solution of {r0} in {solv} was added {r1} .",
    "{r0} and {r1} were combined in {solv} .",
    "A mixture of {r0} and {r1} in {solv} was prepared .",
)
_INTRO_ONE = (
    "A solution of {r0} in {solv} was prepared .",
    "{r0} was dissolved in {solv} .",
)
_REAGENT_ONE = ("{g1} was added .", "Then {g1} was added slowly .")
_REAGENT_TWO = ("{g1} and {g2} were added .", "Then {g1} and {g2} were added slowly .")
_CATALYST = ("The {cat} catalyst was introduced .", "{cat} was used as catalyst .")
_OUTRO = ("The mixture was stirred to give {p} .", "Workup afforded {p} .", "This gave {p} as a solid .")
_DISTRACTORS = (
    "The mixture was stirred at {n} degrees for {m} hours .",
    "The residue was purified by column chromatography .",
    "The organic layer was dried and concentrated .",
    "The precipitate was washed with {solvent} .",
    "The reaction was monitored by thin layer chromatography .",
    "The flask was cooled to room temperature .",
)


@dataclass(frozen=True)
class SyntheticParams:
    n_reactions: int = 2000
    n_types: int = 40
    n_fragments: int = 120
    distractor_rate: float = 0.3
    condition_noise: float = 0.05
    year_range: tuple[int, int] = (2010, 2016)
    n_unlabeled: int = 500
    pool_size: int = 3

    def validate(self) -> None:
        if self.n_reactions < 0 or self.n_unlabeled < 0:
            raise InvalidParams("reaction counts must be non-negative")
        if self.n_types < 1 or (self.n_reactions and self.n_types > self.n_reactions):
            raise InvalidParams("need 1 <= n_types <= n_reactions")
        if not 1 <= self.n_fragments <= len(all_fragments()):
            raise InvalidParams(f"n_fragments must be in [1, {len(all_fragments())}]")
        if not 1 <= self.pool_size <= self.n_fragments:
            raise InvalidParams("pool_size must be in [1, n_fragments]")
        if not (0 <= self.distractor_rate <= 1 and 0 <= self.condition_noise <= 1):
            raise InvalidParams("rates must be probabilities")
        if self.year_range[0] > self.year_range[1]:
            raise InvalidParams("year_range must be (first, last)")


def all_fragments() -> list[str]:
    return [
        prefix + core.format(X=x)
        for prefix, core, x in itertools.product(_PREFIXES, _CORES, _SUBSTITUENTS)
    ]


def _type_conditions(rng: random.Random) -> ConditionSet:
    s1, s2 = rng.sample(SOLVENTS, 2)
    g1, g2 = rng.sample(REAGENTS, 2)
    return ConditionSet(
        catalyst=rng.choice(CATALYSTS) if rng.random() < 0.6 else NONE,
        solvent1=s1,
        solvent2=s2 if rng.random() < 0.5 else NONE,
        reagent1=g1,
        reagent2=g2 if rng.random() < 0.5 else NONE,
    )


_SLOT_POOLS = {"catalyst": CATALYSTS, "solvent1": SOLVENTS, "solvent2": SOLVENTS, "reagent1": REAGENTS, "reagent2": REAGENTS}


def _perturb(cond: ConditionSet, rng: random.Random) -> ConditionSet:
    values = list(cond.as_tuple())
    slot = rng.randrange(len(SLOTS))
    name = SLOTS[slot]
    options = list(_SLOT_POOLS[name]) + ([NONE] if name in ("catalyst", "solvent2", "reagent2") else [])
    # keep paired slots distinct, never repeat the current value
    partner = {1: 2, 2: 1, 3: 4, 4: 3}.get(slot)
    banned = {values[slot]} | ({values[partner]} - {NONE} if partner is not None else set())
    values[slot] = rng.choice([o for o in options if o not in banned])
    return ConditionSet(*values)


def _paragraph(reactants, product, cond: ConditionSet, n_distract: float, rng: random.Random) -> str:
    solv = cond.solvent1 if cond.solvent2 == NONE else f"{cond.solvent1} and {cond.solvent2}"
    intro = rng.choice(_INTRO_TWO if len(reactants) == 2 else _INTRO_ONE)
    body = [intro.format(r0=reactants[0], r1=reactants[-1], solv=solv)]
    middle = []
    if cond.reagent2 == NONE:
        middle.append(rng.choice(_REAGENT_ONE).format(g1=cond.reagent1))
    else:
        middle.append(rng.choice(_REAGENT_TWO).format(g1=cond.reagent1, g2=cond.reagent2))
    if cond.catalyst != NONE:
        middle.append(rng.choice(_CATALYST).format(cat=cond.catalyst))
    rng.shuffle(middle)
    body += middle
    body.append(rng.choice(_OUTRO).format(p=product))
    for template in _DISTRACTORS:
        if rng.random() < n_distract:
            sentence = template.format(n=rng.randrange(0, 120), m=rng.randrange(1, 24), solvent=rng.choice(SOLVENTS))
            body.insert(rng.randrange(1, len(body) + 1), sentence)
    return " ".join(body)


def _atom_count(smiles: str) -> int:
    return len(parse_smiles(smiles).atoms)


def generate_synthetic(params: SyntheticParams | None = None, seed: int = 7, task: str = "rcr") -> tuple[Corpus, Dataset]:
    """Build (corpus, dataset).  The corpus holds one paragraph per labeled reaction
    plus ``n_unlabeled`` paragraphs of extra reactions; ``corpus.sources`` maps every
    paragraph id to its reaction.  Same (params, seed) gives identical output for
    either task; only the labels differ."""
    params = params or SyntheticParams()
    params.validate()
    if task not in ("rcr", "retro"):
        raise InvalidParams(f"unknown task {task!r}")
    rng = random.Random(seed)
    fragments = rng.sample(all_fragments(), params.n_fragments)
    n_types = params.n_types
    types = []
    for t in range(n_types):
        types.append(
            {
                "cls": t % len(CLASSES),
                "pool": rng.sample(fragments, params.pool_size),
                "conditions": _type_conditions(rng),
            }
        )
    total = params.n_reactions + params.n_unlabeled
    seen: set[tuple] = set()
    paragraphs, records, sources, type_of = [], [], {}, {}
    for i in range(total):
        for _ in range(1000):
            tau = rng.randrange(n_types)
            rtype = types[tau]
            cls = CLASSES[rtype["cls"]]
            f1 = rng.choice(rtype["pool"])
            f2 = rng.choice(fragments)
            reactants = tuple(r.format(f1=f1, f2=f2) for r in cls.reactants)
            product = cls.product.format(f1=f1, f2=f2)
            if (reactants, product) not in seen:
                break
        else:
            raise InvalidParams("could not draw a new unique reaction; increase n_fragments")
        seen.add((reactants, product))
        cond = rtype["conditions"]
        if rng.random() < params.condition_noise:
            cond = _perturb(cond, rng)
        year = rng.randint(*params.year_range)
        pid, rid = f"P{i:06d}", f"R{i:06d}"
        paragraphs.append(Paragraph(pid, _paragraph(reactants, product, cond, params.distractor_rate, rng), year))
        sources[pid] = (reactants, product)
        if i >= params.n_reactions:
            continue
        if task == "rcr":
            label = cond
        else:
            n1 = _atom_count(f1)
            atoms = tuple(n1 + off for off in cls.center_offsets)
            center = Center("atom", atoms[0]) if cls.center_kind == "atom" else Center("bond", *sorted(atoms))
            label = RetroLabel(reactants, rtype["cls"], center)
        records.append(ReactionRecord(rid, reactants, product, label, pid, year, True))
        type_of[rid] = tau
    return Corpus(paragraphs, sources), Dataset(records, task, {"type_of": type_of})


def template_table(dataset: Dataset) -> dict[int, dict[str, list[str]]]:
    """Expansion table (template id -> product -> reactants) for a synthetic retro dataset."""
    table: dict[int, dict[str, list[str]]] = {}
    for r in dataset:
        if isinstance(r.label, RetroLabel) and r.label.template_id is not None:
            table.setdefault(r.label.template_id, {})[r.product] = list(r.reactants)
    return table


def check_synthetic(corpus: Corpus, dataset: Dataset) -> list[str]:
    """Return ids of records whose gold paragraph misses one of its condition names."""
    bad = []
    for r in dataset:
        if not isinstance(r.label, ConditionSet) or r.text_id is None:
            continue
        words = set(corpus[r.text_id].text.split())
        if any(v != NONE and v not in words for v in r.label.as_tuple()):
            bad.append(r.id)
    return bad


def params_dict(params: SyntheticParams) -> dict:
    d = asdict(params)
    d["year_range"] = list(d["year_range"])
    return d
