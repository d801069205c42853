"""
Evaluation of generated molecule sets: validity, uniqueness, novelty, internal
diversity, nearest-neighbour similarity and a normalized LogP estimate.

Fingerprints are circular (extended-connectivity style) bit sets held in a
Python int. Every atom invariant is hashed with keyed BLAKE2b truncated to 64
bits (key ``FINGERPRINT_KEY``), so bit positions do not depend on the platform
or on Python's hash seed.
"""
import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from Molecules.molgraph import (
    AtomType, BondType, InvalidGraph, canonical_key, implicit_hydrogens, is_valid, strip_padding,
)

logger = logging.getLogger(__name__)

FINGERPRINT_KEY = b'molfed-circular-fingerprint-v1'
DEFAULT_WIDTH = 2048
DEFAULT_RADIUS = 2
DEFAULT_SNN_SAMPLE_SIZE = 1000
LOGP_BOUNDS = (-2.12, 6.26)

# Reduced atom-contribution table keyed by (element, aromatic, heteroatom neighbours capped at 2)
CRIPPEN_ATOM_CONTRIBUTIONS = {
    ('C', False, 0): 0.1441,
    ('C', False, 1): -0.2035,
    ('C', False, 2): -0.2051,
    ('C', True, 0): 0.1581,
    ('C', True, 1): 0.1360,
    ('C', True, 2): 0.1360,
    ('N', False, 0): -0.7096,
    ('N', False, 1): -0.5188,
    ('N', False, 2): -0.5188,
    ('N', True, 0): -0.4806,
    ('N', True, 1): -0.4806,
    ('N', True, 2): -0.4806,
    ('O', False, 0): -0.2893,
    ('O', False, 1): -0.0684,
    ('O', False, 2): -0.0684,
    ('O', True, 0): 0.1552,
    ('O', True, 1): 0.1552,
    ('O', True, 2): 0.1552,
    ('F', False, 0): 0.4202,
    ('F', False, 1): 0.4202,
    ('Cl', False, 0): 0.6895,
    ('Cl', False, 1): 0.6895,
    ('Br', False, 0): 0.8456,
    ('Br', False, 1): 0.8456,
    ('I', False, 0): 0.8857,
    ('I', False, 1): 0.8857,
    ('P', False, 0): 0.8612,
    ('P', False, 1): 0.8612,
    ('P', False, 2): 0.8612,
    ('P', True, 0): 0.8612,
    ('P', True, 1): 0.8612,
    ('P', True, 2): 0.8612,
    ('S', False, 0): 0.6482,
    ('S', False, 1): 0.6482,
    ('S', False, 2): 0.6482,
    ('S', True, 0): 0.6237,
    ('S', True, 1): 0.6237,
    ('S', True, 2): 0.6237,
}

# Contribution of each implicit hydrogen, keyed by the element it is attached to
CRIPPEN_HYDROGEN_CONTRIBUTIONS = {
    'C': 0.1230,
    'N': 0.2142,
    'O': -0.2677,
    'P': 0.1230,
    'S': 0.1230,
    'F': 0.0,
    'Cl': 0.0,
    'Br': 0.0,
    'I': 0.0,
}


class EmptySet(ValueError):
    pass


class EmptyReference(ValueError):
    pass


class WidthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    width: int = DEFAULT_WIDTH
    radius: int = DEFAULT_RADIUS

    @property
    def on_bits(self):
        return [k for k in range(self.width) if self.bits >> k & 1]

    def __len__(self):
        return self.bits.bit_count()


def _hash64(*values):
    digest = hashlib.blake2b(
        struct.pack(f'<{len(values)}q', *values), digest_size=8, key=FINGERPRINT_KEY,
    ).digest()
    return int.from_bytes(digest, 'little') & 0x7FFF_FFFF_FFFF_FFFF


def _double_bond_order(bond):
    return int(2 * bond.order_value)


def atom_invariants(g):
    """Initial per-atom invariants: hash of (element, degree, twice the summed bond order)."""
    invariants = []
    for i, atom in enumerate(g.atoms):
        neighbors = g.neighbors(i)
        order = sum(_double_bond_order(g.bonds[i][j]) for j in neighbors)
        invariants.append(_hash64(int(atom), len(neighbors), order))
    return invariants


def fingerprint(g, width=DEFAULT_WIDTH, radius=DEFAULT_RADIUS):
    """
    Circular fingerprint: the invariant of every atom at every radius 0..radius
    sets bit (invariant mod width). Each round re-hashes an atom's invariant with
    the sorted (bond order, neighbour invariant) pairs around it.
    """
    stripped = strip_padding(g)
    if not is_valid(stripped, require_connected=False):
        raise InvalidGraph("fingerprints need a valid graph")

    invariants = atom_invariants(stripped)
    bits = 0
    for value in invariants:
        bits |= 1 << (value % width)
    for depth in range(1, radius + 1):
        updated = []
        for i in range(stripped.num_nodes):
            environment = sorted(
                (_double_bond_order(stripped.bonds[i][j]), invariants[j]) for j in stripped.neighbors(i)
            )
            flat = [value for pair in environment for value in pair]
            updated.append(_hash64(depth, invariants[i], *flat))
        invariants = updated
        for value in invariants:
            bits |= 1 << (value % width)
    return Fingerprint(bits, width, radius)


def tanimoto(a, b):
    if a.width != b.width:
        raise WidthMismatch(f"fingerprint widths differ: {a.width} vs {b.width}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


def _warn(warnings, message):
    logger.warning(message)
    if warnings is not None:
        warnings.append(message)


def validity(generated, require_connected=True, warnings=None):
    if not generated:
        _warn(warnings, "validity: no generated molecules")
        return 0.0
    valid = sum(1 for g in generated if is_valid(g, require_connected))
    return 100.0 * valid / len(generated)


def uniqueness(valid, warnings=None):
    if not valid:
        _warn(warnings, "uniqueness: no valid molecules")
        return 0.0
    return 100.0 * len({canonical_key(g) for g in valid}) / len(valid)


def novelty(valid, reference_keys, warnings=None):
    if not valid:
        _warn(warnings, "novelty: no valid molecules")
        return 0.0
    novel = sum(1 for g in valid if canonical_key(g) not in reference_keys)
    return 100.0 * novel / len(valid)


def _int_div(fingerprints, p):
    n = len(fingerprints)
    total = 0.0
    for a in fingerprints:
        for b in fingerprints:
            total += tanimoto(a, b) ** p
    return 1.0 - (total / (n * n)) ** (1.0 / p)


def int_div(valid, p=1, width=DEFAULT_WIDTH, radius=DEFAULT_RADIUS):
    """1 - (mean over all ordered pairs, self-pairs included, of T^p)^(1/p)."""
    if not valid:
        raise EmptySet("internal diversity needs at least one molecule")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    return _int_div([fingerprint(g, width, radius) for g in valid], p)


def reference_sample(reference, sample_size=DEFAULT_SNN_SAMPLE_SIZE, seed=0):
    """Seeded subsample of the reference set, kept in reference order."""
    if len(reference) <= sample_size:
        return list(reference)
    chosen = np.random.default_rng(seed).choice(len(reference), size=sample_size, replace=False)
    return [reference[k] for k in sorted(chosen.tolist())]


def _snn(fingerprints, reference_fingerprints):
    return sum(max(tanimoto(a, b) for b in reference_fingerprints) for a in fingerprints) / len(fingerprints)


def _average_similarity(fingerprints, reference_fingerprints):
    total = sum(tanimoto(a, b) for a in fingerprints for b in reference_fingerprints)
    return total / (len(fingerprints) * len(reference_fingerprints))


def snn(valid, reference, sample_size=DEFAULT_SNN_SAMPLE_SIZE, seed=0, width=DEFAULT_WIDTH, radius=DEFAULT_RADIUS):
    """Mean over generated molecules of the best Tanimoto similarity to the reference sample."""
    if not reference:
        raise EmptyReference("nearest-neighbour similarity needs reference molecules")
    if not valid:
        raise EmptySet("nearest-neighbour similarity needs at least one molecule")
    sample = reference_sample(reference, sample_size, seed)
    return _snn([fingerprint(g, width, radius) for g in valid], [fingerprint(g, width, radius) for g in sample])


def average_similarity(valid, reference, sample_size=DEFAULT_SNN_SAMPLE_SIZE, seed=0,
                       width=DEFAULT_WIDTH, radius=DEFAULT_RADIUS):
    """Mean Tanimoto similarity over all (generated, reference sample) pairs."""
    if not reference:
        raise EmptyReference("average similarity needs reference molecules")
    if not valid:
        raise EmptySet("average similarity needs at least one molecule")
    sample = reference_sample(reference, sample_size, seed)
    return _average_similarity(
        [fingerprint(g, width, radius) for g in valid], [fingerprint(g, width, radius) for g in sample],
    )


def _contribution(symbol, aromatic, hetero):
    for key in ((symbol, aromatic, hetero), (symbol, aromatic, min(hetero, 1)), (symbol, False, min(hetero, 1))):
        if key in CRIPPEN_ATOM_CONTRIBUTIONS:
            return CRIPPEN_ATOM_CONTRIBUTIONS[key]
    return CRIPPEN_ATOM_CONTRIBUTIONS[(symbol, False, 0)]


def logp_raw(g):
    """Sum of atom and implicit-hydrogen contributions from the reduced table."""
    stripped = strip_padding(g)
    if not is_valid(stripped, require_connected=False):
        raise InvalidGraph("LogP needs a valid graph")
    total = 0.0
    for i, atom in enumerate(stripped.atoms):
        neighbors = stripped.neighbors(i)
        aromatic = any(stripped.bonds[i][j] == BondType.AROMATIC for j in neighbors)
        hetero = min(2, sum(1 for j in neighbors if stripped.atoms[j] != AtomType.C))
        total += _contribution(atom.symbol, aromatic, hetero)
        total += implicit_hydrogens(stripped, i) * CRIPPEN_HYDROGEN_CONTRIBUTIONS[atom.symbol]
    return total


def normalize_logp(value, bounds=LOGP_BOUNDS):
    low, high = bounds
    return float(np.clip((value - low) / (high - low), 0.0, 1.0))


def logp(valid, bounds=LOGP_BOUNDS, warnings=None):
    if not valid:
        _warn(warnings, "logp: no valid molecules")
        return 0.0
    return float(np.mean([normalize_logp(logp_raw(g), bounds) for g in valid]))


@dataclass(frozen=True)
class MetricsConfig:
    fingerprint_bits: int = DEFAULT_WIDTH
    fingerprint_radius: int = DEFAULT_RADIUS
    snn_sample_size: int = DEFAULT_SNN_SAMPLE_SIZE
    seed: int = 0
    logp_bounds: tuple = LOGP_BOUNDS
    require_connected: bool = True


@dataclass
class MetricsReport:
    validity: float = 0.0
    uniqueness: float = 0.0
    novelty: float = 0.0
    int_div_1: float = 0.0
    int_div_2: float = 0.0
    snn: float = 0.0
    logp_normalized: float = 0.0
    qed: float = None
    all_pad_fraction: float = 0.0
    n_generated: int = 0
    n_valid: int = 0
    asim: float = 0.0
    warnings: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


def evaluate(generated, reference, cfg=None):
    """
    Score a generated set against the reference (training) molecules. Every
    metric except validity uses the valid molecules only; QED stays null.
    """
    cfg = cfg or MetricsConfig()
    report = MetricsReport(n_generated=len(generated))
    report.validity = validity(generated, cfg.require_connected, report.warnings)
    if generated:
        report.all_pad_fraction = 100.0 * sum(1 for g in generated if g.is_all_padding()) / len(generated)

    valid = [g for g in generated if is_valid(g, cfg.require_connected)]
    report.n_valid = len(valid)
    reference_keys = {canonical_key(g) for g in reference}
    report.uniqueness = uniqueness(valid, report.warnings)
    report.novelty = novelty(valid, reference_keys, report.warnings)
    report.logp_normalized = logp(valid, cfg.logp_bounds, report.warnings)
    if not valid:
        return report

    width, radius = cfg.fingerprint_bits, cfg.fingerprint_radius
    fingerprints = [fingerprint(g, width, radius) for g in valid]
    report.int_div_1 = _int_div(fingerprints, 1)
    report.int_div_2 = _int_div(fingerprints, 2)
    if reference:
        sample = reference_sample(reference, cfg.snn_sample_size, cfg.seed)
        sample_fingerprints = [fingerprint(g, width, radius) for g in sample]
        report.snn = _snn(fingerprints, sample_fingerprints)
        report.asim = _average_similarity(fingerprints, sample_fingerprints)
    else:
        _warn(report.warnings, "snn: no reference molecules")
    return report
