"""
SMILES reading and writing for the organic subset the graph alphabet covers:
C, N, O, F, P, S, Cl, Br, I, aromatic c, n, o, p, s, bonds - = # :, branches
and ring closures (1-9, %nn). Brackets, charges, explicit hydrogens, stereo
marks and fragment separators are rejected.
"""
import logging
from dataclasses import dataclass, field

from django.db import models
from django.utils.translation import gettext_lazy as _

from Molecules.molgraph import (
    N_MAX, AtomType, BondType, InvalidGraph, MolecularGraph, canonical_order, is_valid, strip_padding,
)
from utils.dataset_upload import MissingColumn, read_smiles_records

logger = logging.getLogger(__name__)

__all__ = [
    'SmilesTokenKind', 'SmilesToken', 'SmilesError', 'EmptyInput', 'UnsupportedAtom', 'UnbalancedBranch',
    'DanglingRingClosure', 'TooManyAtoms', 'MalformedSmiles', 'MissingColumn', 'SkippedRecord',
    'LoadedDataset', 'tokenize', 'parse', 'write', 'load_dataset', 'format_skip_log',
]

ORGANIC_ATOMS = {
    'C': AtomType.C, 'N': AtomType.N, 'O': AtomType.O, 'F': AtomType.F, 'P': AtomType.P,
    'S': AtomType.S, 'Cl': AtomType.CL, 'Br': AtomType.BR, 'I': AtomType.I,
}
AROMATIC_ATOMS = {'c': AtomType.C, 'n': AtomType.N, 'o': AtomType.O, 'p': AtomType.P, 's': AtomType.S}
BOND_SYMBOLS = {'-': BondType.SINGLE, '=': BondType.DOUBLE, '#': BondType.TRIPLE, ':': BondType.AROMATIC}


class SmilesTokenKind(models.TextChoices):
    ATOM = 'atom', _('Atom')
    BOND = 'bond', _('Bond')
    BRANCH_OPEN = 'branch_open', _('Branch open')
    BRANCH_CLOSE = 'branch_close', _('Branch close')
    RING_DIGIT = 'ring_digit', _('Ring digit')
    RING_PERCENT = 'ring_percent', _('Ring percent label')


@dataclass(frozen=True)
class SmilesToken:
    kind: str
    text: str
    position: int

    @property
    def is_aromatic(self):
        return self.kind == SmilesTokenKind.ATOM and self.text in AROMATIC_ATOMS

    @property
    def atom_type(self):
        if self.text in ORGANIC_ATOMS:
            return ORGANIC_ATOMS[self.text]
        return AROMATIC_ATOMS[self.text]

    @property
    def ring_label(self):
        return int(self.text.lstrip('%'))


class SmilesError(ValueError):
    """Base for parse errors; ``position`` is the offending character index."""

    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} (position {position})")


class EmptyInput(SmilesError):
    pass


class UnsupportedAtom(SmilesError):
    pass


class UnbalancedBranch(SmilesError):
    pass


class DanglingRingClosure(SmilesError):
    pass


class TooManyAtoms(SmilesError):
    pass


class MalformedSmiles(SmilesError):
    pass


def tokenize(text):
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        pair = text[i:i + 2]
        if pair in ('Cl', 'Br'):
            tokens.append(SmilesToken(SmilesTokenKind.ATOM, pair, i))
            i += 2
            continue
        if ch in ORGANIC_ATOMS or ch in AROMATIC_ATOMS:
            tokens.append(SmilesToken(SmilesTokenKind.ATOM, ch, i))
        elif ch in BOND_SYMBOLS:
            tokens.append(SmilesToken(SmilesTokenKind.BOND, ch, i))
        elif ch == '(':
            tokens.append(SmilesToken(SmilesTokenKind.BRANCH_OPEN, ch, i))
        elif ch == ')':
            tokens.append(SmilesToken(SmilesTokenKind.BRANCH_CLOSE, ch, i))
        elif ch in '123456789':
            tokens.append(SmilesToken(SmilesTokenKind.RING_DIGIT, ch, i))
        elif ch == '%':
            label = text[i + 1:i + 3]
            if len(label) != 2 or not label.isdigit():
                raise MalformedSmiles("'%' must be followed by two digits", i)
            tokens.append(SmilesToken(SmilesTokenKind.RING_PERCENT, text[i:i + 3], i))
            i += 3
            continue
        elif ch == '[':
            raise UnsupportedAtom("bracket atoms are not supported", i)
        elif ch.isascii() and ch.isalpha():
            raise UnsupportedAtom(f"unsupported element '{ch}'", i)
        elif ch == '.':
            raise MalformedSmiles("disconnected fragments are not supported", i)
        else:
            raise MalformedSmiles(f"unexpected character {ch!r}", i)
        i += 1
    return tokens


class _GraphBuilder:
    def __init__(self, n_max):
        self.n_max = n_max
        self.atoms = []
        self.aromatic = []
        self.bonds = {}

    def add_atom(self, token):
        if len(self.atoms) >= self.n_max:
            raise TooManyAtoms(f"more than {self.n_max} heavy atoms", token.position)
        self.atoms.append(token.atom_type)
        self.aromatic.append(token.is_aromatic)
        return len(self.atoms) - 1

    def add_bond(self, i, j, symbol, position):
        if i == j:
            raise MalformedSmiles("ring closure on the same atom", position)
        key = (min(i, j), max(i, j))
        if key in self.bonds:
            raise MalformedSmiles(f"duplicate bond between atoms {i} and {j}", position)
        if symbol is not None:
            bond = BOND_SYMBOLS[symbol.text]
        elif self.aromatic[i] and self.aromatic[j]:
            bond = BondType.AROMATIC
        else:
            bond = BondType.SINGLE
        self.bonds[key] = bond

    def build(self):
        return MolecularGraph.from_bond_list(
            self.atoms, [(i, j, bond) for (i, j), bond in self.bonds.items()], n_max=self.n_max, pad=True,
        )


def parse(text, n_max=N_MAX):
    """
    Parse a SMILES string into a graph padded to ``n_max`` nodes, one node per
    heavy atom in reading order.
    """
    if not text:
        raise EmptyInput("empty SMILES string", 0)

    builder = _GraphBuilder(n_max)
    previous = None
    pending_bond = None
    branches = []
    open_rings = {}

    for token in tokenize(text):
        if token.kind == SmilesTokenKind.ATOM:
            index = builder.add_atom(token)
            if previous is not None:
                builder.add_bond(previous, index, pending_bond, token.position)
            elif pending_bond is not None:
                raise MalformedSmiles("bond symbol before the first atom", pending_bond.position)
            previous, pending_bond = index, None

        elif token.kind == SmilesTokenKind.BOND:
            if previous is None or pending_bond is not None:
                raise MalformedSmiles(f"misplaced bond symbol '{token.text}'", token.position)
            pending_bond = token

        elif token.kind == SmilesTokenKind.BRANCH_OPEN:
            if previous is None or pending_bond is not None:
                raise MalformedSmiles("branch must follow an atom", token.position)
            branches.append((previous, token.position))

        elif token.kind == SmilesTokenKind.BRANCH_CLOSE:
            if not branches:
                raise UnbalancedBranch("')' without matching '('", token.position)
            if pending_bond is not None:
                raise MalformedSmiles("bond symbol before ')'", pending_bond.position)
            previous = branches.pop()[0]

        else:
            if previous is None:
                raise MalformedSmiles("ring closure before the first atom", token.position)
            label = token.ring_label
            if label in open_rings:
                opened_at, opening_bond, _position = open_rings.pop(label)
                if opening_bond and pending_bond and opening_bond.text != pending_bond.text:
                    raise MalformedSmiles(f"conflicting bond symbols on ring {label}", token.position)
                builder.add_bond(opened_at, previous, pending_bond or opening_bond, token.position)
            else:
                open_rings[label] = (previous, pending_bond, token.position)
            pending_bond = None

    if pending_bond is not None:
        raise MalformedSmiles("dangling bond symbol", pending_bond.position)
    if branches:
        raise UnbalancedBranch("'(' without matching ')'", branches[-1][1])
    if open_rings:
        raise DanglingRingClosure("ring closure never closed", min(pos for _, _, pos in open_rings.values()))
    if not builder.atoms:
        raise EmptyInput("no atoms in SMILES string", 0)

    return builder.build()


def _lowercase_atoms(g):
    return [
        atom.symbol.lower() in AROMATIC_ATOMS and BondType.AROMATIC in g.bonds[i]
        for i, atom in enumerate(g.atoms)
    ]


def _bond_symbol(bond, both_lowercase):
    if bond == BondType.SINGLE:
        return '-' if both_lowercase else ''
    if bond == BondType.AROMATIC:
        return '' if both_lowercase else ':'
    return {BondType.DOUBLE: '=', BondType.TRIPLE: '#'}[bond]


def _ring_label(number):
    return str(number) if number < 10 else f"%{number:02d}"


def _write_component(g, start, rank, lowercase):
    parent = {start: None}
    children = {}
    ring_opens = {}
    ring_closes = {}
    used_edges = set()

    def visit(u):
        children[u] = []
        for v in sorted(g.neighbors(u), key=rank.__getitem__):
            edge = frozenset((u, v))
            if edge in used_edges:
                continue
            used_edges.add(edge)
            if v in parent:
                ring_opens.setdefault(v, []).append(u)
                ring_closes.setdefault(u, []).append(v)
            else:
                parent[v] = u
                children[u].append(v)
                visit(v)

    visit(start)

    labels = {}
    free = []
    next_label = [1]

    def allocate():
        if free:
            free.sort()
            return free.pop(0)
        next_label[0] += 1
        return next_label[0] - 1

    def atom_text(i):
        symbol = g.atoms[i].symbol
        return symbol.lower() if lowercase[i] else symbol

    def emit(u):
        parts = []
        if parent[u] is not None:
            p = parent[u]
            parts.append(_bond_symbol(g.bonds[p][u], lowercase[p] and lowercase[u]))
        parts.append(atom_text(u))
        for v in ring_closes.get(u, []):
            number = labels.pop(frozenset((u, v)))
            parts.append(_bond_symbol(g.bonds[u][v], lowercase[u] and lowercase[v]) + _ring_label(number))
            free.append(number)
        for v in ring_opens.get(u, []):
            number = allocate()
            labels[frozenset((u, v))] = number
            parts.append(_ring_label(number))
        for k, child in enumerate(children[u]):
            branch = emit(child)
            parts.append(branch if k == len(children[u]) - 1 else f"({branch})")
        return ''.join(parts)

    return emit(start), set(parent)


def write(g, strict=True):
    """
    Serialize a graph by depth-first traversal from its first canonical node,
    visiting neighbours in canonical order. With ``strict`` the graph must be
    valid; otherwise components are joined with '.' and the all-padding graph
    renders as '*'.
    """
    stripped = strip_padding(g)
    if strict and not is_valid(stripped):
        raise InvalidGraph("only valid graphs can be written as SMILES")
    if stripped.num_nodes == 0:
        return '*'

    order = canonical_order(stripped)
    rank = {node: position for position, node in enumerate(order)}
    lowercase = _lowercase_atoms(stripped)

    fragments = []
    seen = set()
    for start in order:
        if start in seen:
            continue
        text, visited = _write_component(stripped, start, rank, lowercase)
        fragments.append(text)
        seen |= visited
    return '.'.join(fragments)


@dataclass(frozen=True)
class SkippedRecord:
    line: int
    reason: str
    raw: str


@dataclass
class LoadedDataset:
    graphs: list = field(default_factory=list)
    smiles: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    records_scanned: int = 0


def load_dataset(path, column=None, n_max=N_MAX, require_connected=True):
    """
    Parse every record of a SMILES dataset. Records that fail to parse, exceed
    ``n_max`` heavy atoms or fail the validity model are skipped and logged.
    """
    dataset = LoadedDataset()
    for line, raw in read_smiles_records(path, column):
        dataset.records_scanned += 1
        try:
            graph = parse(raw, n_max=n_max)
        except SmilesError as e:
            dataset.skipped.append(SkippedRecord(line, type(e).__name__, raw))
            logger.debug(f"Line {line}: skipped {raw!r}: {e}")
            continue
        if not is_valid(graph, require_connected=require_connected):
            dataset.skipped.append(SkippedRecord(line, 'InvalidValence', raw))
            logger.debug(f"Line {line}: skipped {raw!r}: valence model rejects it")
            continue
        dataset.graphs.append(graph)
        dataset.smiles.append(raw)

    if dataset.skipped:
        logger.warning(
            f"Skipped {len(dataset.skipped)} of {dataset.records_scanned} records from {path}"
        )
    logger.info(f"Loaded {len(dataset.graphs)} molecules from {path}")
    return dataset


def format_skip_log(skipped):
    return ''.join(f"{record.line}\t{record.reason}\t{record.raw}\n" for record in skipped)
