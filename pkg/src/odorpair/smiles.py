"""SMILES parser for the subset of the line notation used by aroma-chemical corpora.

Supported:
    - organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I) and aromatic b c n o p s
    - bracket atoms with isotope, element, hydrogen count, charge and atom class
    - bond symbols ``- = # :`` plus ``/`` and ``\\`` (read as single bonds)
    - branches, ring closures (``1``..``9`` and ``%nn``) and ``.`` disconnections

Stereochemistry (``@``, ``@@``, ``/``, ``\\``) is consumed and dropped; the
number of dropped tokens is kept on the molecule as ``stereo_discarded``.
Aromaticity is kept as written: lowercase atoms are flagged aromatic and an
unmarked bond between two aromatic atoms gets the aromatic order. No
kekulization is attempted.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

__all__ = [
    "Atom",
    "Bond",
    "BondOrder",
    "Molecule",
    "SmilesError",
    "EmptyInput",
    "UnbalancedBranch",
    "UnclosedRing",
    "UnknownElement",
    "MalformedBracketAtom",
    "SmilesSyntaxError",
    "parse_smiles",
    "implicit_hydrogens",
    "ring_bonds",
    "ring_atoms",
    "DEFAULT_VALENCE",
    "ELEMENT_SYMBOLS",
]

# fmt: off
ELEMENT_SYMBOLS: tuple[str, ...] = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga",
    "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd",
    "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm",
    "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os",
    "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa",
    "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg",
    "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
# fmt: on

ATOMIC_NUMBER: dict[str, int] = {sym: i + 1 for i, sym in enumerate(ELEMENT_SYMBOLS)}

_ORGANIC = {"B": 5, "C": 6, "N": 7, "O": 8, "P": 15, "S": 16, "F": 9, "Cl": 17, "Br": 35, "I": 53}
_AROMATIC_ORGANIC = {"b": 5, "c": 6, "n": 7, "o": 8, "p": 15, "s": 16}
_AROMATIC_BRACKET = {"b": 5, "c": 6, "n": 7, "o": 8, "p": 15, "s": 16, "se": 34, "as": 33, "te": 52}

# One default valence per element. Charge adjustment (see _valence):
#   N, P, O, S: valence + charge        ([NH4+] -> 4, [O-] -> 1)
#   B:          valence - charge        ([BH4-] -> 4)
#   C, halogens: valence - |charge|
DEFAULT_VALENCE: dict[int, int] = {5: 3, 6: 4, 7: 3, 8: 2, 15: 3, 16: 2, 9: 1, 17: 1, 35: 1, 53: 1}

MAX_ABS_CHARGE = 4


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence_contribution(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)


_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_STEREO_BONDS = {"/", "\\"}
_DIGITS = frozenset("0123456789")


class SmilesError(ValueError):
    """Base class for parse failures. ``position`` is a 0-based index into the input."""

    def __init__(self, message: str, position: int, text: str = "") -> None:
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class EmptyInput(SmilesError):
    pass


class UnbalancedBranch(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class MalformedBracketAtom(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    """Anything else: stray characters, dangling bonds, duplicate bonds."""


@dataclass(frozen=True)
class Atom:
    element: int
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    isotope: int | None = None

    @property
    def symbol(self) -> str:
        return ELEMENT_SYMBOLS[self.element - 1]


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source: str = ""
    stereo_discarded: int = 0
    _adjacency: tuple[tuple[tuple[int, int], ...], ...] = field(
        default=(), repr=False, compare=False
    )

    def __post_init__(self) -> None:
        n = len(self.atoms)
        if n == 0:
            raise ValueError("molecule must have at least one atom")
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for k, bond in enumerate(self.bonds):
            if not (0 <= bond.a < n and 0 <= bond.b < n) or bond.a == bond.b:
                raise ValueError(f"invalid bond endpoints {bond.a}-{bond.b}")
            adj[bond.a].append((bond.b, k))
            adj[bond.b].append((bond.a, k))
        object.__setattr__(self, "_adjacency", tuple(tuple(row) for row in adj))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self, i: int) -> tuple[tuple[int, int], ...]:
        """(neighbor index, bond index) pairs of atom ``i``, in bond order."""
        return self._adjacency[i]

    def degree(self, i: int) -> int:
        return len(self._adjacency[i])


def _valence(element: int, charge: int) -> int | None:
    base = DEFAULT_VALENCE.get(element)
    if base is None:
        return None
    if element in (7, 8, 15, 16):
        return base + charge
    if element == 5:
        return base - charge
    return base - abs(charge)


def implicit_hydrogens(mol: Molecule, atom_index: int) -> int:
    """Hydrogen count of an atom.

    Bracket atoms always carry an explicit count (zero when omitted), which is
    returned as-is. Otherwise the count is the charge-adjusted default valence
    minus the bond-order sum, where aromatic bonds count 1.5 and the sum is
    rounded up (benzene carbon: 3.0 -> 1 H; lone aromatic bond: 1.5 -> 2 -> 2 H).
    Elements without a table entry get 0.
    """
    atom = mol.atoms[atom_index]
    if atom.explicit_h is not None:
        return atom.explicit_h
    valence = _valence(atom.element, atom.formal_charge)
    if valence is None:
        return 0
    used = sum(mol.bonds[k].order.valence_contribution for _, k in mol.neighbors(atom_index))
    return max(0, valence - math.ceil(used - 1e-9))


def ring_bonds(mol: Molecule) -> frozenset[int]:
    """Indices of bonds lying on at least one cycle (i.e. bonds that are not bridges)."""
    n = mol.n_atoms
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    counter = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = counter
        counter += 1
        # (node, bond used to reach it, iterator position)
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]
        while stack:
            v, via, pos = stack[-1]
            nbrs = mol.neighbors(v)
            if pos < len(nbrs):
                stack[-1] = (v, via, pos + 1)
                w, k = nbrs[pos]
                if k == via:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = counter
                    counter += 1
                    stack.append((w, k, 0))
                else:
                    low[v] = min(low[v], disc[w])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add(via)
    return frozenset(k for k in range(len(mol.bonds)) if k not in bridges)


def ring_atoms(mol: Molecule) -> frozenset[int]:
    in_ring = ring_bonds(mol)
    atoms: set[int] = set()
    for k in in_ring:
        atoms.add(mol.bonds[k].a)
        atoms.add(mol.bonds[k].b)
    return frozenset(atoms)


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: list[Bond] = []
        self.bond_pairs: set[tuple[int, int]] = set()
        # ring label -> (atom index, explicit bond order or None, position)
        self.open_rings: dict[int, tuple[int, BondOrder | None, int]] = {}
        self.branch_stack: list[tuple[int, int]] = []
        self.prev: int | None = None
        self.pending_bond: BondOrder | None = None
        self.pending_pos = -1
        self.stereo = 0

    def error(self, cls: type[SmilesError], message: str, pos: int | None = None) -> SmilesError:
        return cls(message, self.pos if pos is None else pos, self.text)

    def peek(self, offset: int = 0) -> str:
        i = self.pos + offset
        return self.text[i] if i < len(self.text) else ""

    def parse(self) -> Molecule:
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch == "(":
                if self.prev is None:
                    raise self.error(SmilesSyntaxError, "branch without a preceding atom")
                if self.pending_bond is not None:
                    raise self.error(SmilesSyntaxError, "bond symbol before branch")
                if self.peek(1) == ")":
                    raise self.error(SmilesSyntaxError, "empty branch")
                self.branch_stack.append((self.prev, self.pos))
                self.pos += 1
            elif ch == ")":
                if not self.branch_stack:
                    raise self.error(UnbalancedBranch, "unmatched ')'")
                if self.pending_bond is not None:
                    raise self.error(SmilesSyntaxError, "dangling bond", self.pending_pos)
                self.prev, _ = self.branch_stack.pop()
                self.pos += 1
            elif ch in _BOND_SYMBOLS or ch in _STEREO_BONDS:
                if self.prev is None:
                    raise self.error(SmilesSyntaxError, "bond without a preceding atom")
                if self.pending_bond is not None:
                    raise self.error(SmilesSyntaxError, "consecutive bond symbols")
                if ch in _STEREO_BONDS:
                    self.stereo += 1
                    self.pending_bond = BondOrder.SINGLE
                else:
                    self.pending_bond = _BOND_SYMBOLS[ch]
                self.pending_pos = self.pos
                self.pos += 1
            elif ch == ".":
                if self.prev is None or self.pending_bond is not None:
                    raise self.error(SmilesSyntaxError, "misplaced '.'")
                if self.branch_stack:
                    raise self.error(SmilesSyntaxError, "'.' inside a branch")
                self.prev = None
                self.pos += 1
            elif ch in _DIGITS or ch == "%":
                self._ring_closure()
            elif ch == "[":
                self._add_atom(self._bracket_atom())
            elif ch.isspace():
                raise self.error(SmilesSyntaxError, "whitespace inside SMILES")
            else:
                self._add_atom(self._organic_atom())
        if self.pending_bond is not None:
            raise self.error(SmilesSyntaxError, "dangling bond", self.pending_pos)
        if self.branch_stack:
            raise self.error(UnbalancedBranch, "unclosed '('", self.branch_stack[-1][1])
        if self.open_rings:
            label, (_, _, pos) = min(self.open_rings.items(), key=lambda kv: kv[1][2])
            raise self.error(UnclosedRing, f"ring bond {label} never closed", pos)
        if self.prev is None:
            raise self.error(SmilesSyntaxError, "trailing '.'")
        return Molecule(tuple(self.atoms), tuple(self.bonds), self.text, self.stereo)

    def _organic_atom(self) -> Atom:
        two = self.text[self.pos : self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return Atom(_ORGANIC[two])
        ch = self.text[self.pos]
        if ch in _ORGANIC:
            self.pos += 1
            return Atom(_ORGANIC[ch])
        if ch in _AROMATIC_ORGANIC:
            self.pos += 1
            return Atom(_AROMATIC_ORGANIC[ch], aromatic=True)
        if ch.isascii() and ch.isalpha() or ch == "*":
            raise self.error(UnknownElement, f"unsupported atom symbol {ch!r}")
        raise self.error(SmilesSyntaxError, f"unexpected character {ch!r}")

    def _bracket_atom(self) -> Atom:
        start = self.pos
        end = self.text.find("]", start)
        if end == -1:
            raise self.error(MalformedBracketAtom, "unterminated bracket atom", start)
        body = self.text[start + 1 : end]
        i = 0

        def fail(message: str) -> SmilesError:
            return self.error(MalformedBracketAtom, message, start + 1 + i)

        isotope = None
        j = i
        while j < len(body) and body[j] in _DIGITS:
            j += 1
        if j > i:
            isotope = int(body[i:j])
            i = j
        if i >= len(body):
            raise fail("missing element symbol")
        aromatic = False
        if body[i].isupper():
            if i + 1 < len(body) and body[i + 1].islower() and body[i : i + 2] in ATOMIC_NUMBER:
                symbol = body[i : i + 2]
            else:
                symbol = body[i]
            if symbol not in ATOMIC_NUMBER:
                raise self.error(UnknownElement, f"unknown element {symbol!r}", start + 1 + i)
            element = ATOMIC_NUMBER[symbol]
        elif body[i].islower():
            if body[i : i + 2] in _AROMATIC_BRACKET:
                symbol = body[i : i + 2]
            elif body[i] in _AROMATIC_BRACKET:
                symbol = body[i]
            else:
                raise self.error(UnknownElement, f"unknown aromatic symbol {body[i]!r}", start + 1 + i)
            element = _AROMATIC_BRACKET[symbol]
            aromatic = True
        elif body[i] == "*":
            raise self.error(UnknownElement, "wildcard atom is not supported", start + 1 + i)
        else:
            raise fail(f"unexpected {body[i]!r} in bracket atom")
        i += len(symbol)

        if i < len(body) and body[i] == "@":
            # one chirality mark: @, @@, or @TH1 / @AL2 / @SP3 / @TB10 / @OH20
            self.stereo += 1
            i += 1
            if i < len(body) and body[i] == "@":
                i += 1
            elif body[i : i + 2] in ("TH", "AL", "SP", "TB", "OH"):
                i += 2
                while i < len(body) and body[i] in _DIGITS:
                    i += 1

        h_count = 0
        if i < len(body) and body[i] == "H":
            i += 1
            j = i
            while j < len(body) and body[j] in _DIGITS:
                j += 1
            h_count = int(body[i:j]) if j > i else 1
            i = j

        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            sym = body[i]
            i += 1
            j = i
            while j < len(body) and body[j] in _DIGITS:
                j += 1
            if j > i:
                charge = sign * int(body[i:j])
                i = j
            else:
                magnitude = 1
                while i < len(body) and body[i] == sym:
                    magnitude += 1
                    i += 1
                charge = sign * magnitude
            if abs(charge) > MAX_ABS_CHARGE:
                raise fail(f"formal charge {charge} out of range")

        if i < len(body) and body[i] == ":":
            i += 1
            j = i
            while j < len(body) and body[j] in _DIGITS:
                j += 1
            if j == i:
                raise fail("empty atom class")
            i = j

        if i != len(body):
            raise fail(f"unexpected {body[i]!r} in bracket atom")
        self.pos = end + 1
        return Atom(element, aromatic, charge, h_count, isotope)

    def _add_atom(self, atom: Atom) -> None:
        idx = len(self.atoms)
        self.atoms.append(atom)
        if self.prev is not None:
            order = self.pending_bond
            if order is None:
                order = self._default_order(self.prev, idx)
            self._add_bond(self.prev, idx, order, self.pending_pos)
        self.pending_bond = None
        self.pending_pos = -1
        self.prev = idx

    def _default_order(self, a: int, b: int) -> BondOrder:
        if self.atoms[a].aromatic and self.atoms[b].aromatic:
            return BondOrder.AROMATIC
        return BondOrder.SINGLE

    def _add_bond(self, a: int, b: int, order: BondOrder, pos: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise self.error(SmilesSyntaxError, "ring bond from an atom to itself", pos)
        if key in self.bond_pairs:
            raise self.error(SmilesSyntaxError, f"duplicate bond between atoms {a} and {b}", pos)
        self.bond_pairs.add(key)
        self.bonds.append(Bond(a, b, order))

    def _ring_closure(self) -> None:
        start = self.pos
        if self.prev is None:
            raise self.error(SmilesSyntaxError, "ring bond without a preceding atom")
        if self.text[self.pos] == "%":
            digits = self.text[self.pos + 1 : self.pos + 3]
            if len(digits) != 2 or not all(d in _DIGITS for d in digits):
                raise self.error(SmilesSyntaxError, "'%' must be followed by two digits")
            label = int(digits)
            self.pos += 3
        else:
            label = int(self.text[self.pos])
            self.pos += 1
        bond = self.pending_bond
        self.pending_bond = None
        self.pending_pos = -1
        if label in self.open_rings:
            other, other_bond, _ = self.open_rings.pop(label)
            if bond is not None and other_bond is not None and bond != other_bond:
                raise self.error(SmilesSyntaxError, f"conflicting bond orders on ring bond {label}", start)
            order = bond or other_bond or self._default_order(other, self.prev)
            self._add_bond(other, self.prev, order, start)
        else:
            self.open_rings[label] = (self.prev, bond, start)


def parse_smiles(text: str) -> Molecule:
    """Parse ``text`` into a :class:`Molecule`.

    Raises:
        SmilesError: one of its subclasses, carrying the offending position.
    """
    if not isinstance(text, str):
        raise TypeError(f"expected str, got {type(text).__name__}")
    if not text or not text.strip():
        raise EmptyInput("empty SMILES", 0, text)
    return _Parser(text).parse()
