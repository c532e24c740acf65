"""Molecules, XYZ files, distance geometry, placement orderings and batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ELEMENTS = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}
SYMBOLS = {z: s for s, z in ELEMENTS.items()}
MIN_SEPARATION = 0.1


class XYZParseError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Molecule:
    """Nuclear charges and Cartesian positions (Angstrom)."""

    charges: np.ndarray
    positions: np.ndarray
    comment: str = field(default="", compare=False)

    def __post_init__(self):
        charges = np.asarray(self.charges, dtype=np.int64).reshape(-1)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(charges) < 1 or len(charges) != len(positions):
            raise ValueError(
                f"need n >= 1 charges and matching positions, got {len(charges)} and {len(positions)}"
            )
        if np.any(charges < 1):
            raise ValueError("nuclear charges must be positive integers")
        if len(charges) > 1:
            d = distance_matrix_array(positions)
            d[np.diag_indices_from(d)] = np.inf
            if d.min() <= MIN_SEPARATION:
                raise ValueError(f"atoms closer than {MIN_SEPARATION} A")
        charges.setflags(write=False)
        positions.setflags(write=False)
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "positions", positions)

    def __len__(self):
        return len(self.charges)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return np.array_equal(self.charges, other.charges) and np.array_equal(
            self.positions, other.positions
        )

    __hash__ = None

    @property
    def formula(self):
        return formula_string(self.charges)

    @property
    def heavy_mask(self):
        return self.charges != 1

    def permuted(self, order):
        order = np.asarray(order)
        return Molecule(self.charges[order], self.positions[order], self.comment)


def formula_string(charges):
    counts = {}
    for z in charges:
        counts[int(z)] = counts.get(int(z), 0) + 1
    # Hill order: C, H, then alphabetical
    keys = sorted(counts, key=lambda z: (z != 6, z != 1, SYMBOLS.get(z, str(z))))
    return "".join(f"{SYMBOLS.get(z, z)}{counts[z] if counts[z] > 1 else ''}" for z in keys)


def distance_matrix_array(positions):
    positions = np.asarray(positions, dtype=np.float64)
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def distance_matrix(mol):
    """Symmetric Euclidean distance matrix with zero diagonal."""
    return distance_matrix_array(mol.positions)


# ----------------------------------------------------------------------- XYZ


def parse_xyz(text):
    """Parse one or more XYZ blocks into a list of molecules."""
    if hasattr(text, "read"):
        text = text.read()
    lines = text.splitlines()
    molecules = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        count_line = i + 1
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise XYZParseError(f"malformed atom count {lines[i]!r}", count_line) from None
        if n < 0:
            raise XYZParseError(f"negative atom count {n}", count_line)
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        charges, coords = [], []
        for k in range(n):
            lineno = i + 3 + k
            if lineno > len(lines):
                raise XYZParseError(f"expected {n} atom lines, found {k}", lineno)
            tokens = lines[lineno - 1].split()
            if len(tokens) < 4:
                raise XYZParseError(f"expected 'symbol x y z', got {lines[lineno - 1]!r}", lineno)
            charges.append(_charge(tokens[0], lineno))
            try:
                coords.append([float(t.replace("*^", "e")) for t in tokens[1:4]])
            except ValueError:
                raise XYZParseError(f"non-numeric coordinate in {lines[lineno - 1]!r}", lineno) from None
        i += 2 + n
        if n == 0:
            continue
        try:
            molecules.append(Molecule(charges, coords, comment.strip()))
        except ValueError as exc:
            raise XYZParseError(str(exc), count_line) from None
    return molecules


def _charge(token, lineno):
    if token.isdigit():
        z = int(token)
        if z in SYMBOLS:
            return z
    else:
        symbol = token.capitalize()
        if symbol in ELEMENTS:
            return ELEMENTS[symbol]
    raise XYZParseError(f"unknown element {token!r}", lineno)


def format_xyz(molecules, comments=None):
    out = []
    for k, mol in enumerate(molecules):
        comment = comments[k] if comments is not None else mol.comment
        out.append(str(len(mol)))
        out.append(comment)
        for z, (x, y, zc) in zip(mol.charges, mol.positions):
            out.append(f"{SYMBOLS[int(z)]} {x:.6f} {y:.6f} {zc:.6f}")
    return "\n".join(out) + ("\n" if out else "")


def write_xyz(path, molecules, comments=None):
    Path(path).write_text(format_xyz(molecules, comments))


def read_xyz(path):
    return parse_xyz(Path(path).read_text())


def read_manifest(path):
    """Read every XYZ file listed (one path per line) in a manifest."""
    base = Path(path).parent
    molecules = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        molecules.extend(read_xyz(p if p.is_absolute() else base / p))
    return molecules


def load_dataset(path):
    path = Path(path)
    if path.suffix in (".txt", ".lst", ".manifest"):
        return read_manifest(path)
    return read_xyz(path)


def split_dataset(molecules, rng, n_train=None, train_fraction=None):
    """Seeded shuffle split into (train, test)."""
    order = rng.permutation(len(molecules))
    if n_train is None:
        fraction = 1.0 if train_fraction is None else train_fraction
        n_train = int(round(fraction * len(molecules)))
    n_train = min(n_train, len(molecules))
    train = [molecules[k] for k in order[:n_train]]
    test = [molecules[k] for k in order[n_train:]]
    return train, test


# ------------------------------------------------------------------ ordering


@dataclass(frozen=True)
class OrderedMolecule:
    """A molecule with a placement order in which hydrogens come last."""

    molecule: Molecule
    order: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.intp)
        n = len(self.molecule)
        if sorted(order.tolist()) != list(range(n)):
            raise ValueError("placement order must be a permutation of the atom indices")
        is_h = self.molecule.charges[order] == 1
        if is_h.any() and not is_h[np.argmax(is_h):].all():
            raise ValueError("hydrogens must be placed after every heavy atom")
        order.setflags(write=False)
        object.__setattr__(self, "order", order)

    def __len__(self):
        return len(self.order)

    @property
    def charges(self):
        return self.molecule.charges[self.order]

    @property
    def positions(self):
        return self.molecule.positions[self.order]


def randomize_order(mol, rng):
    """Random placement order: shuffled heavy atoms, then shuffled hydrogens."""
    heavy = np.flatnonzero(mol.charges != 1)
    hydrogens = np.flatnonzero(mol.charges == 1)
    return OrderedMolecule(mol, np.concatenate([rng.permutation(heavy), rng.permutation(hydrogens)]))


def canonical_order(mol):
    """Deterministic order: heavy atoms then hydrogens, each in file order."""
    heavy = np.flatnonzero(mol.charges != 1)
    hydrogens = np.flatnonzero(mol.charges == 1)
    return OrderedMolecule(mol, np.concatenate([heavy, hydrogens]))


@dataclass(frozen=True)
class Batch:
    """A group of ordered molecules with a per-step mask.

    ``mask[b, s]`` weights the prediction step that places atom ``s + 1`` of
    molecule ``b``; padded steps beyond a molecule's length are zero.
    """

    molecules: tuple
    mask: np.ndarray

    def __len__(self):
        return len(self.molecules)


def make_batch(ordered):
    ordered = tuple(ordered)
    steps = max((len(m) - 1 for m in ordered), default=0)
    mask = np.zeros((len(ordered), steps))
    for b, m in enumerate(ordered):
        mask[b, : len(m) - 1] = 1.0
    return Batch(ordered, mask)


def iterate_batches(molecules, batch_size, rng):
    """Endless stream of batches; each epoch reshuffles molecules and orders."""
    if not molecules:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    while True:
        perm = rng.permutation(len(molecules))
        for start in range(0, len(perm), batch_size):
            chosen = perm[start : start + batch_size]
            yield make_batch(randomize_order(molecules[k], rng) for k in chosen)
