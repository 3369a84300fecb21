"""Hypothesis strategies shared across test modules."""

from hypothesis import strategies as st

from textreact.chem import Atom, Bond, MolGraph, write_smiles
from textreact.data.synthetic import CLASSES, all_fragments

FRAGMENTS = all_fragments()


@st.composite
def mol_graphs(draw, max_atoms: int = 14):
    """Random connected graphs (a tree plus a few ring bonds) over the organic subset."""
    n = draw(st.integers(1, max_atoms))
    elements = draw(st.lists(st.sampled_from(["C", "N", "O", "S", "F", "Cl", "Br", "P"]), min_size=n, max_size=n))
    charges = draw(st.lists(st.sampled_from([0, 0, 0, 1, -1]), min_size=n, max_size=n))
    atoms = [Atom(e, False, c, -1, 0 if c else None, bool(c)) for e, c in zip(elements, charges)]
    bonds, seen = [], set()
    for i in range(1, n):
        j = draw(st.integers(0, i - 1))
        seen.add((j, i))
        bonds.append(Bond(j, i, draw(st.sampled_from(["single", "single", "double", "triple"]))))
    n_rings = draw(st.integers(0, 2)) if n > 2 else 0
    for _ in range(n_rings):
        a, b = sorted(draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True)))
        if (a, b) not in seen:
            seen.add((a, b))
            bonds.append(Bond(a, b, "single"))
    return MolGraph(atoms, bonds)


@st.composite
def smiles_strings(draw):
    """Accepted SMILES: synthetic fragments, synthetic products, and written random graphs."""
    kind = draw(st.integers(0, 2))
    if kind == 0:
        return draw(st.sampled_from(FRAGMENTS))
    if kind == 1:
        cls = draw(st.sampled_from(CLASSES))
        f1, f2 = draw(st.sampled_from(FRAGMENTS)), draw(st.sampled_from(FRAGMENTS))
        return cls.product.format(f1=f1, f2=f2)
    return write_smiles(draw(mol_graphs()), draw(st.integers(0, 1000)))
