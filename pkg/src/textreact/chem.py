"""SMILES handling: tokenizer, a small graph parser/writer and hashed fingerprints.

The grammar is the organic subset plus bracket atoms carrying an element,
an optional hydrogen count and a formal charge.  Stereo markers, isotopes
and atom classes are rejected.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import TextReactError

FP_WIDTH = 2048

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC = ("b", "c", "n", "o", "p", "s")
BOND_CHARS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}
BOND_SYMBOL = {"single": "-", "double": "=", "triple": "#", "aromatic": ":"}

# element, optional H count, optional charge; whatever is left is an error
_BRACKET_ELEMENT = re.compile(r"[A-Z][a-z]?|[a-z]{1,2}")
_BRACKET_H = re.compile(r"H(\d?)")
_BRACKET_CHARGE = re.compile(r"(\+\+?|--?)(\d*)")


class SmilesError(TextReactError, ValueError):
    pass


class UnknownCharacter(SmilesError):
    def __init__(self, smiles: str, offset: int):
        self.offset = offset
        super().__init__(f"unknown character at byte offset {offset} in {smiles!r}")


class UnbalancedBracket(SmilesError):
    def __init__(self, smiles: str, offset: int):
        self.offset = offset
        super().__init__(f"unbalanced bracket at byte offset {offset} in {smiles!r}")


class UnclosedRing(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class DanglingBond(SmilesError):
    pass


class InvalidRingClosure(SmilesError):
    pass


@dataclass(frozen=True)
class SmilesToken:
    text: str
    kind: str  # atom, bracket_atom, bond, ring_digit, branch_open, branch_close, dot
    atom_ordinal: int | None = None

    @property
    def is_atom(self) -> bool:
        return self.kind in ("atom", "bracket_atom")


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    token_pos: int = -1
    hcount: int | None = None
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, str]]]:
        adj: list[list[tuple[int, str]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.a].append((bond.b, bond.order))
            adj[bond.b].append((bond.a, bond.order))
        return adj

    def bond_index(self) -> dict[tuple[int, int], int]:
        return {(b.a, b.b): i for i, b in enumerate(self.bonds)}


def _byte_offset(s: str, i: int) -> int:
    return len(s[:i].encode("utf-8"))


def _parse_bracket_body(smiles: str, start: int, body: str) -> None:
    """Validate the inside of ``[...]``; raise with the offset of the first bad char."""
    pos = 0
    m = _BRACKET_ELEMENT.match(body, pos)
    if not m:
        raise UnknownCharacter(smiles, _byte_offset(smiles, start + 1 + pos))
    pos = m.end()
    m = _BRACKET_H.match(body, pos)
    if m:
        pos = m.end()
    m = _BRACKET_CHARGE.match(body, pos)
    if m:
        pos = m.end()
    if pos != len(body):
        raise UnknownCharacter(smiles, _byte_offset(smiles, start + 1 + pos))


def tokenize_smiles(s: str) -> list[SmilesToken]:
    if not s:
        raise SmilesError("empty SMILES string")
    tokens: list[SmilesToken] = []
    n_atoms = 0
    i = 0
    while i < len(s):
        ch = s[i]
        if not ch.isascii():
            raise UnknownCharacter(s, _byte_offset(s, i))
        if ch == "[":
            j = s.find("]", i + 1)
            if j < 0:
                raise UnbalancedBracket(s, _byte_offset(s, i))
            _parse_bracket_body(s, i, s[i + 1 : j])
            tokens.append(SmilesToken(s[i : j + 1], "bracket_atom", n_atoms))
            n_atoms += 1
            i = j + 1
            continue
        if ch == "]":
            raise UnbalancedBracket(s, _byte_offset(s, i))
        two = s[i : i + 2]
        if two in ("Cl", "Br"):
            tokens.append(SmilesToken(two, "atom", n_atoms))
            n_atoms += 1
            i += 2
            continue
        if ch in ORGANIC or ch in AROMATIC:
            tokens.append(SmilesToken(ch, "atom", n_atoms))
            n_atoms += 1
        elif ch in BOND_CHARS:
            tokens.append(SmilesToken(ch, "bond"))
        elif ch.isdigit():
            tokens.append(SmilesToken(ch, "ring_digit"))
        elif ch == "%":
            if not (s[i + 1 : i + 3].isdigit() and len(s[i + 1 : i + 3]) == 2):
                raise UnknownCharacter(s, _byte_offset(s, i))
            tokens.append(SmilesToken(s[i : i + 3], "ring_digit"))
            i += 3
            continue
        elif ch == "(":
            tokens.append(SmilesToken(ch, "branch_open"))
        elif ch == ")":
            tokens.append(SmilesToken(ch, "branch_close"))
        elif ch == ".":
            tokens.append(SmilesToken(ch, "dot"))
        else:
            raise UnknownCharacter(s, _byte_offset(s, i))
        i += 1
    return tokens


def _atom_from_token(tok: SmilesToken, pos: int) -> Atom:
    if tok.kind == "atom":
        sym = tok.text
        return Atom(sym.capitalize() if sym in AROMATIC else sym, sym in AROMATIC, 0, pos)
    body = tok.text[1:-1]
    m = _BRACKET_ELEMENT.match(body)
    sym = m.group(0)
    rest = body[m.end() :]
    hcount = 0
    mh = _BRACKET_H.match(rest)
    if mh:
        hcount = int(mh.group(1) or 1)
        rest = rest[mh.end() :]
    charge = 0
    if rest:
        mc = _BRACKET_CHARGE.match(rest)
        signs, digits = mc.group(1), mc.group(2)
        charge = (len(signs) if not digits else int(digits)) * (1 if signs[0] == "+" else -1)
    aromatic = sym.islower()
    return Atom(sym.capitalize() if aromatic else sym, aromatic, charge, pos, hcount, True)


def _implicit_order(g: MolGraph, a: int, b: int) -> str:
    return "aromatic" if g.atoms[a].aromatic and g.atoms[b].aromatic else "single"


def parse_smiles(s: str) -> MolGraph:
    tokens = tokenize_smiles(s)
    g = MolGraph()
    seen: set[tuple[int, int]] = set()

    def add_bond(a: int, b: int, order: str | None) -> None:
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            raise InvalidRingClosure(f"duplicate or self bond {key} in {s!r}")
        seen.add(key)
        g.bonds.append(Bond(key[0], key[1], order or _implicit_order(g, a, b)))

    prev: int | None = None
    pending: str | None = None
    stack: list[int] = []
    branch_has_atom: list[bool] = []
    rings: dict[str, tuple[int, str | None]] = {}
    for pos, tok in enumerate(tokens):
        if tok.is_atom:
            idx = len(g.atoms)
            g.atoms.append(_atom_from_token(tok, pos))
            if prev is not None:
                add_bond(prev, idx, pending)
            elif pending is not None:
                raise DanglingBond(f"bond without a left atom in {s!r}")
            if branch_has_atom:
                branch_has_atom[-1] = True
            prev, pending = idx, None
        elif tok.kind == "bond":
            if prev is None or pending is not None:
                raise DanglingBond(f"misplaced bond {tok.text!r} at token {pos} in {s!r}")
            pending = BOND_CHARS[tok.text]
        elif tok.kind == "ring_digit":
            if prev is None:
                raise DanglingBond(f"ring digit {tok.text} without an atom in {s!r}")
            if tok.text in rings:
                other, order = rings.pop(tok.text)
                if order and pending and order != pending:
                    raise InvalidRingClosure(f"conflicting ring bond orders for {tok.text} in {s!r}")
                add_bond(other, prev, order or pending)
            else:
                rings[tok.text] = (prev, pending)
            pending = None
        elif tok.kind == "branch_open":
            if prev is None or pending is not None:
                raise DanglingBond(f"branch without an anchor atom in {s!r}")
            stack.append(prev)
            branch_has_atom.append(False)
        elif tok.kind == "branch_close":
            if not stack:
                raise UnbalancedParenthesis(f"unmatched ')' in {s!r}")
            if pending is not None:
                raise DanglingBond(f"bond before ')' in {s!r}")
            if not branch_has_atom.pop():
                raise UnbalancedParenthesis(f"empty branch in {s!r}")
            prev = stack.pop()
        else:  # dot
            if prev is None or pending is not None:
                raise DanglingBond(f"misplaced '.' in {s!r}")
            if stack:
                raise UnbalancedParenthesis(f"'.' inside a branch in {s!r}")
            prev = None
    if pending is not None:
        raise DanglingBond(f"trailing bond in {s!r}")
    if stack:
        raise UnbalancedParenthesis(f"unclosed '(' in {s!r}")
    if rings:
        raise UnclosedRing(f"unclosed ring digit(s) {sorted(rings)} in {s!r}")
    if prev is None:
        raise DanglingBond(f"trailing '.' in {s!r}")
    return g


def _atom_text(atom: Atom) -> str:
    sym = atom.element.lower() if atom.aromatic else atom.element
    if not atom.bracket and atom.charge == 0 and (sym in ORGANIC or sym in AROMATIC):
        return sym
    out = sym
    if atom.hcount:
        out += "H" + (str(atom.hcount) if atom.hcount > 1 else "")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        out += sign + (str(abs(atom.charge)) if abs(atom.charge) > 1 else "")
    return f"[{out}]"


def _bond_text(g: MolGraph, a: int, b: int, order: str) -> str:
    both_aromatic = g.atoms[a].aromatic and g.atoms[b].aromatic
    if order == "single":
        return "-" if both_aromatic else ""
    if order == "aromatic":
        return "" if both_aromatic else ":"
    return BOND_SYMBOL[order]


def _ring_label(d: int) -> str:
    return str(d) if d < 10 else f"%{d}"


def write_smiles_ordered(g: MolGraph, seed: int) -> tuple[str, list[int]]:
    """Randomised DFS writer.  Also returns the source atom index of each written atom."""
    rng = random.Random(seed)
    adj = g.neighbors()
    n = len(g.atoms)
    visited = [False] * n
    order: list[int] = []
    pieces: list[str] = []

    # components in order of their lowest atom index
    comp_of = [-1] * n
    components: list[list[int]] = []
    for start in range(n):
        if comp_of[start] >= 0:
            continue
        members, todo = [], [start]
        comp_of[start] = len(components)
        while todo:
            u = todo.pop()
            members.append(u)
            for v, _ in adj[u]:
                if comp_of[v] < 0:
                    comp_of[v] = len(components)
                    todo.append(v)
        components.append(sorted(members))

    for members in components:
        root = rng.choice(members)
        children: dict[int, list[tuple[int, str]]] = {}
        tree_edges: set[tuple[int, int]] = set()
        rank: dict[int, int] = {}

        def discover(u: int) -> None:
            visited[u] = True
            rank[u] = len(rank)
            nbrs = list(adj[u])
            rng.shuffle(nbrs)
            children[u] = []
            for v, bo in nbrs:
                if not visited[v]:
                    tree_edges.add((min(u, v), max(u, v)))
                    children[u].append((v, bo))
                    discover(v)

        discover(root)
        ring_bonds = [
            b for b in g.bonds if comp_of[b.a] == comp_of[root] and (b.a, b.b) not in tree_edges
        ]
        opens: dict[int, list[tuple[int, str]]] = {u: [] for u in members}
        closes: dict[int, list[int]] = {u: [] for u in members}
        for b in ring_bonds:
            first, second = (b.a, b.b) if rank[b.a] < rank[b.b] else (b.b, b.a)
            opens[first].append((second, b.order))
            closes[second].append(first)
        free: list[int] = []
        next_digit = 1
        label: dict[tuple[int, int], int] = {}
        out: list[str] = []

        def emit(u: int) -> None:
            nonlocal next_digit
            order.append(u)
            out.append(_atom_text(g.atoms[u]))
            closed = []
            for other in sorted(closes[u], key=lambda x: rank[x]):
                d = label.pop((other, u))
                out.append(_ring_label(d))
                closed.append(d)
            for other, bo in sorted(opens[u], key=lambda x: rank[x[0]]):
                if free:
                    d = free.pop(0)
                else:
                    d = next_digit
                    next_digit += 1
                label[(u, other)] = d
                out.append(_bond_text(g, u, other, bo) + _ring_label(d))
            # digits closed here become reusable only after this atom
            free.extend(closed)
            free.sort()
            kids = children[u]
            for i, (v, bo) in enumerate(kids):
                branch = i < len(kids) - 1
                if branch:
                    out.append("(")
                out.append(_bond_text(g, u, v, bo))
                emit(v)
                if branch:
                    out.append(")")

        emit(root)
        pieces.append("".join(out))
    return ".".join(pieces), order


def write_smiles(g: MolGraph, seed: int) -> str:
    return write_smiles_ordered(g, seed)[0]


def randomize_smiles(s: str, seed: int) -> str:
    return write_smiles(parse_smiles(s), seed)


# --- fingerprints -----------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def atom_environments(g: MolGraph) -> list[bytes]:
    """Canonical byte keys: one radius-0 and one radius-1 key per atom.

    radius 0: ``0:<element>|<charge>|<aromatic>``
    radius 1: ``1:<element>|<charge>|<aromatic>|<sorted neighbour elements, comma separated>``
    """
    adj = g.neighbors()
    keys = []
    for i, atom in enumerate(g.atoms):
        core = f"{atom.element}|{atom.charge}|{int(atom.aromatic)}"
        nbrs = ",".join(sorted(g.atoms[j].element for j, _ in adj[i]))
        keys.append(f"0:{core}".encode("ascii"))
        keys.append(f"1:{core}|{nbrs}".encode("ascii"))
    return keys


def mol_fingerprint(g: MolGraph, width: int = FP_WIDTH) -> np.ndarray:
    fp = np.zeros(width, dtype=np.int64)
    for key in atom_environments(g):
        fp[fnv1a_64(key) % width] += 1
    return fp


def reaction_fingerprint(reactants: Sequence[MolGraph], product: MolGraph, width: int = FP_WIDTH) -> np.ndarray:
    if not reactants:
        raise ValueError("reaction fingerprint needs at least one reactant")
    fp = mol_fingerprint(product, width)
    for r in reactants:
        fp -= mol_fingerprint(r, width)
    return fp


def reaction_fingerprint_smiles(reactants: Iterable[str], product: str) -> np.ndarray:
    return reaction_fingerprint([parse_smiles(r) for r in reactants], parse_smiles(product))


class LengthMismatch(TextReactError, ValueError):
    pass


def fp_distance(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) != len(b):
        raise LengthMismatch(f"fingerprint lengths differ: {len(a)} vs {len(b)}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.dot(diff, diff)))
