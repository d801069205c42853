"""
Molecular graphs with a fixed maximum number of atoms.

A graph is stored in index form (one atom type per node, one bond type per node
pair) and converts to the one-hot form used by the networks: the node label
matrix V (N x B) and the adjacency tensor A (N x N x T).
"""
import logging
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import networkx as nx
import numpy as np
from django.db import models
from django.utils.translation import gettext_lazy as _

logger = logging.getLogger(__name__)

# Default maximum number of atoms per graph
N_MAX = 10


class AtomType(models.IntegerChoices):
    C = 0, 'C'
    N = 1, 'N'
    O = 2, 'O'
    F = 3, 'F'
    BR = 4, 'Br'
    P = 5, 'P'
    S = 6, 'S'
    CL = 7, 'Cl'
    I = 8, 'I'
    PAD = 9, '*'

    @property
    def symbol(self):
        return self.label

    @classmethod
    def from_symbol(cls, symbol):
        for member in cls:
            if member.label == symbol:
                return member
        raise KeyError(symbol)


class BondType(models.IntegerChoices):
    ZERO = 0, _('Zero')
    SINGLE = 1, _('Single')
    DOUBLE = 2, _('Double')
    TRIPLE = 3, _('Triple')
    AROMATIC = 4, _('Aromatic')

    @property
    def order_value(self):
        return BOND_ORDERS[self]


NUM_ATOM_TYPES = len(AtomType)
NUM_BOND_TYPES = len(BondType)

BOND_ORDERS = {
    BondType.ZERO: Fraction(0),
    BondType.SINGLE: Fraction(1),
    BondType.DOUBLE: Fraction(2),
    BondType.TRIPLE: Fraction(3),
    BondType.AROMATIC: Fraction(3, 2),
}

MAX_VALENCES = {
    AtomType.C: (4,),
    AtomType.N: (3,),
    AtomType.O: (2,),
    AtomType.F: (1,),
    AtomType.BR: (1,),
    AtomType.CL: (1,),
    AtomType.I: (1,),
    AtomType.P: (3, 5),
    AtomType.S: (2, 4, 6),
}

# Aromatic atoms that donate a lone pair count one per aromatic bond (furan, thiophene)
LONE_PAIR_AROMATICS = frozenset({AtomType.O, AtomType.S})


class InvalidGraph(ValueError):
    pass


class GraphTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class MolecularGraph:
    """
    Heavy-atom graph. ``atoms[i]`` is the type of node i and ``bonds[i][j]`` the
    bond between nodes i and j; PAD nodes are placeholders with no bonds.
    """
    atoms: tuple
    bonds: tuple
    n_max: int = N_MAX

    def __post_init__(self):
        atoms = tuple(AtomType(a) for a in self.atoms)
        bonds = tuple(tuple(BondType(b) for b in row) for row in self.bonds)
        object.__setattr__(self, 'atoms', atoms)
        object.__setattr__(self, 'bonds', bonds)

        n = len(atoms)
        if n > self.n_max:
            raise GraphTooLarge(f"{n} nodes exceed n_max={self.n_max}")
        if len(bonds) != n or any(len(row) != n for row in bonds):
            raise InvalidGraph(f"adjacency must be {n}x{n}")
        for i in range(n):
            if bonds[i][i] != BondType.ZERO:
                raise InvalidGraph(f"node {i} has a bond to itself")
            for j in range(i + 1, n):
                if bonds[i][j] != bonds[j][i]:
                    raise InvalidGraph(f"asymmetric bond between nodes {i} and {j}")
                if bonds[i][j] != BondType.ZERO and AtomType.PAD in (atoms[i], atoms[j]):
                    raise InvalidGraph(f"bond between nodes {i} and {j} touches a padding node")

    @classmethod
    def from_bond_list(cls, atoms, bond_list=(), n_max=N_MAX, pad=False):
        """
        Build a graph from atom types (members or symbols) and ``(i, j, bond)``
        triples. With ``pad`` the node list is filled with PAD up to ``n_max``.
        """
        atoms = [a if isinstance(a, AtomType) else AtomType.from_symbol(a) for a in atoms]
        if len(atoms) > n_max:
            raise GraphTooLarge(f"{len(atoms)} nodes exceed n_max={n_max}")
        if pad:
            atoms = atoms + [AtomType.PAD] * (n_max - len(atoms))
        n = len(atoms)
        matrix = [[BondType.ZERO] * n for _ in range(n)]
        for i, j, bond in bond_list:
            matrix[i][j] = matrix[j][i] = BondType(bond)
        return cls(tuple(atoms), tuple(tuple(row) for row in matrix), n_max)

    @classmethod
    def from_tensors(cls, node_labels, adjacency, n_max=None):
        """Decode one-hot (or scored) V and A arrays by taking the argmax per row."""
        node_labels = np.asarray(node_labels)
        adjacency = np.asarray(adjacency)
        atoms = node_labels.argmax(axis=-1).tolist()
        bonds = adjacency.argmax(axis=-1).tolist()
        return cls(tuple(atoms), tuple(tuple(row) for row in bonds), n_max or len(atoms))

    @property
    def num_nodes(self):
        return len(self.atoms)

    @property
    def node_labels(self):
        """The one-hot node label matrix V, shape (num_nodes, B)."""
        matrix = np.zeros((self.num_nodes, NUM_ATOM_TYPES), dtype=np.float32)
        matrix[np.arange(self.num_nodes), list(self.atoms)] = 1.0
        return matrix

    @property
    def adjacency(self):
        """The one-hot adjacency tensor A, shape (num_nodes, num_nodes, T)."""
        codes = np.asarray(self.bonds, dtype=np.int64).reshape(self.num_nodes, self.num_nodes)
        return np.eye(NUM_BOND_TYPES, dtype=np.float32)[codes]

    def neighbors(self, i):
        return [j for j, bond in enumerate(self.bonds[i]) if bond != BondType.ZERO]

    def is_all_padding(self):
        return all(atom == AtomType.PAD for atom in self.atoms)

    def to_networkx(self):
        graph = nx.Graph()
        for i, atom in enumerate(self.atoms):
            graph.add_node(i, atom=atom)
        for i in range(self.num_nodes):
            for j in self.neighbors(i):
                if i < j:
                    graph.add_edge(i, j, bond=self.bonds[i][j])
        return graph


def strip_padding(g):
    """Induced subgraph on the non-PAD nodes, renumbered in their original order."""
    keep = [i for i, atom in enumerate(g.atoms) if atom != AtomType.PAD]
    if len(keep) == g.num_nodes:
        return g
    atoms = tuple(g.atoms[i] for i in keep)
    bonds = tuple(tuple(g.bonds[i][j] for j in keep) for i in keep)
    return MolecularGraph(atoms, bonds, g.n_max)


def aromatic_bond_count(g, i):
    return sum(1 for bond in g.bonds[i] if bond == BondType.AROMATIC)


def bond_valence(g, i):
    """
    Whole-number valence used by node i's bonds. Aromatic bonds count 1.5 each,
    rounded down; lone-pair aromatics (O, S) count 1 per aromatic bond.
    """
    aromatic = aromatic_bond_count(g, i)
    localized = sum((b.order_value for b in g.bonds[i] if b != BondType.AROMATIC), Fraction(0))
    if g.atoms[i] in LONE_PAIR_AROMATICS:
        aromatic_order = aromatic
    else:
        aromatic_order = int(BondType.AROMATIC.order_value * aromatic)
    return int(localized) + aromatic_order


def implicit_hydrogens(g, i):
    """Hydrogens completing the smallest feasible valence of node i, or None if none fits."""
    atom = g.atoms[i]
    if atom == AtomType.PAD:
        return 0
    used = bond_valence(g, i)
    for valence in MAX_VALENCES[atom]:
        if valence >= used:
            return valence - used
    return None


def _has_feasible_valences(g):
    for i in range(g.num_nodes):
        if implicit_hydrogens(g, i) is None:
            return False
        aromatic = aromatic_bond_count(g, i)
        if 0 < aromatic < 2:
            return False
    return True


def is_valid(g, require_connected=True):
    """
    Chemical validity of the padding-stripped graph: at least one atom, every
    valence satisfiable, aromatic atoms with two or more aromatic bonds and,
    unless relaxed, a single connected component.
    """
    stripped = strip_padding(g)
    if stripped.num_nodes == 0:
        return False
    if not _has_feasible_valences(stripped):
        return False
    if require_connected and not nx.is_connected(stripped.to_networkx()):
        return False
    return True


def _refine(g, colors, adjacency_lists):
    # Colour refinement until the partition stops splitting
    while True:
        signatures = [
            (colors[i], tuple(sorted((g.bonds[i][j], colors[j]) for j in adjacency_lists[i])))
            for i in range(g.num_nodes)
        ]
        ranks = {signature: rank for rank, signature in enumerate(sorted(set(signatures)))}
        refined = [ranks[signature] for signature in signatures]
        if len(ranks) == len(set(colors)):
            return refined
        colors = refined


def _encode(g, order):
    n = len(order)
    header = bytes([n]) + bytes(int(g.atoms[i]) for i in order)
    edges = bytes(int(g.bonds[order[a]][order[b]]) for a in range(n) for b in range(a + 1, n))
    return header + edges


def _shared_prefix(a, b):
    depth = 0
    while depth < min(len(a), len(b)) and a[depth] == b[depth]:
        depth += 1
    return depth


class _CanonicalSearch:
    """
    Individualization-refinement search for the smallest leaf encoding.

    Two leaves with equal encodings differ by an automorphism. Every one found
    is kept: a child whose vertex shares an orbit with an explored sibling
    (under the kept automorphisms fixing the current path) is skipped, and a
    leaf equivalent to the first leaf sends the search back to the node where
    their paths part.
    """

    def __init__(self, g):
        self.g = g
        self.adjacency_lists = [g.neighbors(i) for i in range(g.num_nodes)]
        self.first = None
        self.best = None
        self.automorphisms = []

    def run(self):
        self._visit([int(atom) for atom in self.g.atoms], ())
        return self.best

    def _visit(self, colors, path):
        colors = _refine(self.g, colors, self.adjacency_lists)
        n = self.g.num_nodes
        if len(set(colors)) == n:
            return self._leaf(sorted(range(n), key=colors.__getitem__), path)

        counts = Counter(colors)
        target = min(color for color, count in counts.items() if count > 1)
        explored = []
        for v in (i for i in range(n) if colors[i] == target):
            if explored and self._in_explored_orbit(v, explored, path):
                continue
            explored.append(v)
            individualized = [2 * c + 1 for c in colors]
            individualized[v] = 2 * colors[v]
            jump = self._visit(individualized, path + (v,))
            if jump is not None and jump < len(path):
                return jump
        return None

    def _leaf(self, order, path):
        encoding = _encode(self.g, order)
        if self.first is None:
            self.first = (encoding, order, path)
            self.best = (encoding, order)
            return None
        if encoding == self.first[0]:
            self._keep_automorphism(self.first[1], order)
            return _shared_prefix(self.first[2], path)
        if encoding == self.best[0]:
            self._keep_automorphism(self.best[1], order)
        elif encoding < self.best[0]:
            self.best = (encoding, order)
        return None

    def _keep_automorphism(self, order, image):
        mapping = [0] * self.g.num_nodes
        for source, target in zip(order, image):
            mapping[source] = target
        self.automorphisms.append(mapping)

    def _in_explored_orbit(self, v, explored, path):
        parent = list(range(self.g.num_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for mapping in self.automorphisms:
            if all(mapping[p] == p for p in path):
                for source, target in enumerate(mapping):
                    parent[find(source)] = find(target)
        root = find(v)
        return any(find(u) == root for u in explored)


def canonical_order(g):
    """
    Node order of the canonical form: colour refinement, then an
    individualization search over the classes that remain tied, pruned by the
    automorphisms it discovers.
    """
    if g.num_nodes > g.n_max:
        raise GraphTooLarge(f"{g.num_nodes} nodes exceed n_max={g.n_max}")
    if g.num_nodes == 0:
        return []
    return _CanonicalSearch(g).run()[1]


def canonical_key(g):
    """Byte string equal for two graphs exactly when they are isomorphic (types preserved)."""
    stripped = strip_padding(g)
    if stripped.num_nodes > g.n_max:
        raise GraphTooLarge(f"{stripped.num_nodes} nodes exceed n_max={g.n_max}")
    if stripped.num_nodes == 0:
        return bytes([0])
    return _encode(stripped, canonical_order(stripped))


def molecular_formula(g):
    """
    Formula label with implicit hydrogens: Hill order when carbon is present,
    otherwise heavy atoms alphabetically followed by hydrogen (NH3, OH2).
    """
    stripped = strip_padding(g)
    if stripped.num_nodes == 0 or not _has_feasible_valences(stripped):
        raise InvalidGraph("molecular formula needs a valid graph")

    counts = Counter(atom.symbol for atom in stripped.atoms)
    hydrogens = sum(implicit_hydrogens(stripped, i) for i in range(stripped.num_nodes))
    if 'C' in counts:
        order = ['C'] + (['H'] if hydrogens else []) + sorted(s for s in counts if s != 'C')
    else:
        order = sorted(counts) + (['H'] if hydrogens else [])
    counts['H'] = hydrogens

    return ''.join(symbol + (str(counts[symbol]) if counts[symbol] > 1 else '') for symbol in order)
